"""Model components: SE-gated bottleneck encoders (2D and 3D) fused at the
feature level, plus checkpoint persistence.

An encoder is stem conv -> bottleneck stages -> global average pool. The 2D
branch takes 3-channel images, the 3D branch a 2-channel volume (structure
and flow stacked as input channels). The fusion model concatenates the two
feature vectors and applies a single linear classifier over the 6 severity
grades.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import io as tio
from . import tensor as T
from .tensor import ShapeError, Tensor

N_GRADES = 6


# ---------------------------------------------------------------------------
# module system
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container with hierarchical names.

    Assigning a requires-grad Tensor registers a parameter, assigning a
    Module registers a child; buffers (running stats) are registered
    explicitly. Registration order is construction order, which keeps
    parameter traversal — and therefore seeded initialization and optimizer
    state — deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv(Module):
    """Convolution layer; He-normal init, bias off by default (BN follows)."""

    def __init__(self, dim, in_ch, out_ch, kernel, stride=1, padding=None, bias=False, *, rng, dtype):
        super().__init__()
        self.dim = dim
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch) + (kernel,) * dim
        fan_in = in_ch * kernel**dim
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        op = T.conv2d if self.dim == 2 else T.conv3d
        return op(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, *, dtype):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta,
            running_mean=self.running_mean, running_var=self.running_var,
            training=self.training, eps=self.eps, momentum=self.momentum,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, *, rng, dtype, gain=1.0):
        super().__init__()
        std = np.sqrt(gain / in_features)
        self.weight = Tensor(rng.normal(0.0, std, (out_features, in_features)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def se_gate(features: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-and-excitation: pool -> bottleneck MLP -> sigmoid gates -> rescale.

    ``w1`` is [hidden, C], ``w2`` is [C, hidden]; gates are strictly inside
    (0, 1), so zero weights halve every channel exactly.
    """
    squeezed = T.global_avg_pool(features)
    hidden = T.relu(T.linear(squeezed, w1))
    gates = T.sigmoid(T.linear(hidden, w2))
    return T.scale_channels(features, gates)


class SEGate(Module):
    def __init__(self, channels, reduction, *, rng, dtype):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (hidden, channels)).astype(dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (channels, hidden)).astype(dtype), requires_grad=True)

    def forward(self, features: Tensor) -> Tensor:
        return se_gate(features, self.w1, self.w2)


class Bottleneck(Module):
    """1x1 reduce -> 3x3 (3x3x3) -> 1x1 expand, SE gate, residual add, relu.

    A projection shortcut (1x1 conv + BN) is used when the stride or channel
    count changes; otherwise the identity.
    """

    def __init__(self, dim, in_ch, planes, stride, expansion, se_reduction, se_enabled, *, rng, dtype):
        super().__init__()
        out_ch = planes * expansion
        self.conv1 = Conv(dim, in_ch, planes, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(planes, dtype=dtype)
        self.conv2 = Conv(dim, planes, planes, 3, stride=stride, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(planes, dtype=dtype)
        self.conv3 = Conv(dim, planes, out_ch, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm(out_ch, dtype=dtype)
        self.se = SEGate(out_ch, se_reduction, rng=rng, dtype=dtype) if se_enabled else None
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv = Conv(dim, in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm(out_ch, dtype=dtype)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        if self.se is not None:
            h = self.se(h)
        s = x if self.shortcut_conv is None else self.shortcut_bn(self.shortcut_conv(x))
        return T.relu(T.add(h, s))


# ---------------------------------------------------------------------------
# encoder configuration
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    """Parametric description of one SE-ResNet encoder.

    The "resnet50" preset carries the reference geometry (stages [3,4,6,3],
    widths [64,128,256,512]); "tiny" is the desk-scale preset with the same
    schema at [1,1,1,1] x [8,16,32,64]. Stage 1 keeps the stem resolution,
    later stages open with stride 2.
    """

    dimensionality: int
    in_channels: int
    stem_channels: int
    stage_block_counts: list = field(default_factory=lambda: [1, 1, 1, 1])
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    stem_kernel: int = 3
    stem_stride: int = 2
    bottleneck_expansion: int = 4
    se_reduction: int = 16
    se_enabled: bool = True

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ValueError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if len(self.stage_block_counts) != len(self.stage_channels) or not self.stage_channels:
            raise ValueError("stage_block_counts and stage_channels must be equal-length and non-empty")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1] * self.bottleneck_expansion

    @property
    def stage_strides(self) -> list:
        return [1] + [2] * (len(self.stage_channels) - 1)

    @property
    def total_stride(self) -> int:
        total = self.stem_stride
        for s in self.stage_strides:
            total *= s
        return total

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def preset(name: str, dimensionality: int, se_enabled: bool = True) -> EncoderConfig:
    in_ch = 3 if dimensionality == 2 else 2
    if name == "tiny":
        return EncoderConfig(dimensionality, in_ch, stem_channels=8, se_enabled=se_enabled)
    if name == "resnet50":
        return EncoderConfig(
            dimensionality, in_ch,
            stem_channels=64, stage_block_counts=[3, 4, 6, 3],
            stage_channels=[64, 128, 256, 512], stem_kernel=7,
            se_enabled=se_enabled,
        )
    raise ValueError(f"unknown preset {name!r} (expected 'tiny' or 'resnet50')")


class Encoder(Module):
    def __init__(self, config: EncoderConfig, *, rng, dtype):
        super().__init__()
        cfg = config
        self.config = cfg
        dim = cfg.dimensionality
        self.stem_conv = Conv(
            dim, cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, stride=cfg.stem_stride,
            rng=rng, dtype=dtype,
        )
        self.stem_bn = BatchNorm(cfg.stem_channels, dtype=dtype)
        self.stages = ModuleList()
        in_ch = cfg.stem_channels
        for planes, n_blocks, stride in zip(cfg.stage_channels, cfg.stage_block_counts, cfg.stage_strides):
            for b in range(n_blocks):
                self.stages.append(
                    Bottleneck(
                        dim, in_ch, planes, stride if b == 0 else 1,
                        cfg.bottleneck_expansion, cfg.se_reduction, cfg.se_enabled,
                        rng=rng, dtype=dtype,
                    )
                )
                in_ch = planes * cfg.bottleneck_expansion

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _validate_spatial(self, shape) -> None:
        cfg = self.config
        extents = list(shape[2:])
        if len(extents) != cfg.dimensionality:
            raise ShapeError(
                f"encoder{cfg.dimensionality}d: expected {cfg.dimensionality + 2}-d input, got shape {tuple(shape)}"
            )
        extents = [(e + 2 * (cfg.stem_kernel // 2) - cfg.stem_kernel) // cfg.stem_stride + 1 for e in extents]
        for i, stride in enumerate(cfg.stage_strides, start=1):
            if any(e < stride for e in extents):
                raise ShapeError(
                    f"encoder{cfg.dimensionality}d stage {i}: spatial extents {tuple(extents)} "
                    f"too small for stride {stride} (input shape {tuple(shape)})"
                )
            extents = [(e - 1) // stride + 1 for e in extents]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"encoder{self.config.dimensionality}d: expected {self.config.in_channels} "
                f"input channels, got {x.shape[1]} (axis 1)"
            )
        self._validate_spatial(x.shape)
        h = T.relu(self.stem_bn(self.stem_conv(x)))
        for block in self.stages:
            h = block(h)
        return T.global_avg_pool(h)


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------


class FusionModel(Module):
    """Two encoders concatenated at the feature level, one linear head.

    ``features`` exposes the raw fusion vector so the mixup step can
    interpose between feature extraction and classification.
    """

    kind = "fusion"

    def __init__(self, cfg2d: EncoderConfig, cfg3d: EncoderConfig, n_classes=N_GRADES, *, rng, dtype):
        super().__init__()
        self.n_classes = n_classes
        self.encoder2d = Encoder(cfg2d, rng=rng, dtype=dtype)
        self.encoder3d = Encoder(cfg3d, rng=rng, dtype=dtype)
        self.classifier = Linear(cfg2d.feature_dim + cfg3d.feature_dim, n_classes, rng=rng, dtype=dtype)

    def features(self, x2d: Tensor, x3d: Tensor) -> Tensor:
        if x2d.shape[0] != x3d.shape[0]:
            raise ShapeError(f"fusion: batch sizes differ ({x2d.shape[0]} vs {x3d.shape[0]})")
        return T.concat(self.encoder2d(x2d), self.encoder3d(x3d), axis=1)

    def classify(self, z: Tensor) -> Tensor:
        return self.classifier(z)

    def forward(self, x2d: Tensor, x3d: Tensor):
        z = self.features(x2d, x3d)
        return self.classify(z), z

    def configs(self) -> dict:
        return {
            "encoder2d": self.encoder2d.config.to_dict(),
            "encoder3d": self.encoder3d.config.to_dict(),
        }


class SingleModalityModel(Module):
    """One encoder plus head; the other modality's input is ignored."""

    def __init__(self, cfg: EncoderConfig, n_classes=N_GRADES, *, rng, dtype):
        super().__init__()
        self.kind = "2d_only" if cfg.dimensionality == 2 else "3d_only"
        self.n_classes = n_classes
        self.encoder = Encoder(cfg, rng=rng, dtype=dtype)
        self.classifier = Linear(cfg.feature_dim, n_classes, rng=rng, dtype=dtype)

    def features(self, x2d: Optional[Tensor], x3d: Optional[Tensor]) -> Tensor:
        x = x2d if self.kind == "2d_only" else x3d
        return self.encoder(x)

    def classify(self, z: Tensor) -> Tensor:
        return self.classifier(z)

    def forward(self, x2d, x3d):
        z = self.features(x2d, x3d)
        return self.classify(z), z

    def configs(self) -> dict:
        key = "encoder2d" if self.kind == "2d_only" else "encoder3d"
        return {key: self.encoder.config.to_dict()}


def build_model(kind: str, cfg2d: Optional[EncoderConfig], cfg3d: Optional[EncoderConfig],
                n_classes=N_GRADES, *, rng, dtype):
    if kind == "fusion":
        return FusionModel(cfg2d, cfg3d, n_classes, rng=rng, dtype=dtype)
    if kind == "2d_only":
        return SingleModalityModel(cfg2d, n_classes, rng=rng, dtype=dtype)
    if kind == "3d_only":
        return SingleModalityModel(cfg3d, n_classes, rng=rng, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(model, base_path, extra: Optional[dict] = None) -> None:
    """Write `base_path`.bin (tensor records) and `base_path`.json (sidecar).

    The sidecar maps stable parameter/buffer names to byte offsets in the
    binary file and embeds the encoder configs, so a checkpoint is
    self-describing.
    """
    from . import __version__

    base = str(base_path)
    offsets = {}
    with open(base + ".bin", "wb") as fp:
        for name, p in model.named_parameters():
            offsets[name] = tio.write_record(fp, p.data)
        for name, b in model.named_buffers():
            offsets[name] = tio.write_record(fp, b)
    dtype_name = str(next(iter(model.parameters())).dtype)
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tool_version": __version__,
        "kind": model.kind,
        "n_classes": model.n_classes,
        "dtype": dtype_name,
        "encoder2d": model.configs().get("encoder2d"),
        "encoder3d": model.configs().get("encoder3d"),
        "tensors": offsets,
        "extra": extra or {},
    }
    with open(base + ".json", "w") as fp:
        json.dump(sidecar, fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_checkpoint(base_path):
    """Rebuild the model from a checkpoint pair; returns (model, sidecar)."""
    base = str(base_path)
    with open(base + ".json") as fp:
        sidecar = json.load(fp)
    if sidecar.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {sidecar.get('format_version')}")
    cfg2d = EncoderConfig.from_dict(sidecar["encoder2d"]) if sidecar.get("encoder2d") else None
    cfg3d = EncoderConfig.from_dict(sidecar["encoder3d"]) if sidecar.get("encoder3d") else None
    dtype = np.dtype(sidecar["dtype"])
    model = build_model(
        sidecar["kind"], cfg2d, cfg3d, sidecar["n_classes"],
        rng=np.random.default_rng(0), dtype=dtype,
    )
    offsets = sidecar["tensors"]
    with open(base + ".bin", "rb") as fp:
        for name, p in model.named_parameters():
            arr = tio.read_record(fp, offsets[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(dtype)
            p.zero_grad()
        for name, b in model.named_buffers():
            arr = tio.read_record(fp, offsets[name])
            b[...] = arr.astype(dtype)
    model.eval()
    return model, sidecar
