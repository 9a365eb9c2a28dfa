"""Reverse-mode autodiff over row-major numpy arrays.

A :class:`Tensor` wraps an ndarray plus, when it was produced by an
operation, a tape node (parent tensors and a backward closure). Running an op
therefore records the computation graph implicitly; :func:`backward` walks
that graph once in reverse topological order, accumulating gradients
additively so fan-out (the same tensor consumed twice) sums branch
contributions.

Conventions used throughout the package:

* batch axis 0, channel axis 1, spatial axes after that;
* two dtypes only — float32 for training throughput, float64 for
  finite-difference verification (``gradcheck`` is unreliable in float32);
* every op validates that its output is finite and raises
  :class:`NonFiniteError` naming the op otherwise, so a NaN can never travel
  silently through a training run.
"""

from __future__ import annotations

import builtins
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; the message names the op."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (used for evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape.

    ``requires_grad`` tensors are created with a zero ``grad`` array so that a
    backward pass over a graph that never touches them still leaves a
    well-defined (all-zero) gradient. Repeated backward passes accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._inputs: tuple = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    # -- construction used by ops ------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(op, data)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if _grad_enabled and builtins.any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._inputs = tuple(inputs)
            out._backward = backward
        else:
            out.requires_grad = False
            out._inputs = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def sum(self) -> "Tensor":
        return sum_all(self)


def _unify_dtype(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from `loss`.

    `loss` must be a scalar. Each tape node is visited exactly once; fan-out
    gradients are accumulated before a node's own backward runs.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")

    topo: list[Tensor] = []
    seen = {id(loss)}
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        stack.append((node, True))
        for parent in node._inputs:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, gin in zip(node._inputs, node._backward(g)):
            if gin is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = gin if acc is None else acc + gin


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _unify_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _unify_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def shift(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data + s, (a,), lambda g: (g,), "shift")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),), "sum")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# linear algebra and structure ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map [N,F] @ [G,F]^T (+ bias[G]) -> [N,G]."""
    parents = (x, weight) if bias is None else (x, weight, bias)
    _unify_dtype("linear", *parents)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[1]} != weight features {weight.shape[1]} (axis 1)"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data

    def _back(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(y, parents, _back, "linear")


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    _unify_dtype("concat", a, b)
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: ranks differ ({a.shape} vs {b.shape})")
    for ax in range(a.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ on axis {ax}")
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def _back(g):
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[axis] = slice(0, split)
        hi[axis] = slice(split, None)
        return g[tuple(lo)], g[tuple(hi)]

    return Tensor._from_op(out, (a, b), _back, "concat")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a [N,...] tensor; backward scatter-adds into sources."""
    idx = np.asarray(index)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match batch {a.shape[0]}")

    def _back(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(a.data[idx].copy(), (a,), _back, "gather_rows")


def scale_channels(features: Tensor, gates: Tensor) -> Tensor:
    """Multiply [N,C,spatial...] features by per-sample per-channel gates [N,C]."""
    _unify_dtype("scale_channels", features, gates)
    if gates.shape != features.shape[:2]:
        raise ShapeError(
            f"scale_channels: gates {gates.shape} must match feature axes 0-1 {features.shape[:2]}"
        )
    spatial_axes = tuple(range(2, features.ndim))
    gd = gates.data.reshape(gates.shape + (1,) * len(spatial_axes))
    fd = features.data

    def _back(g):
        return g * gd, (g * fd).sum(axis=spatial_axes)

    return Tensor._from_op(fd * gd, (features, gates), _back, "scale_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: [N,C,spatial...] -> [N,C]."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool: need at least one spatial axis, got shape {x.shape}")
    spatial_axes = tuple(range(2, x.ndim))
    count = 1
    for ax in spatial_axes:
        count *= x.shape[ax]
    inv = 1.0 / count

    def _back(g):
        g_full = g.reshape(g.shape + (1,) * len(spatial_axes))
        return (np.broadcast_to(g_full * inv, x.shape).astype(x.dtype, copy=False),)

    return Tensor._from_op(x.data.mean(axis=spatial_axes), (x,), _back, "global_avg_pool")


# ---------------------------------------------------------------------------
# convolutions (kernel backend does the heavy lifting)
# ---------------------------------------------------------------------------


def _conv_shape_check(op, x, weight, bias, stride, padding, nd):
    if x.ndim != nd + 2 or weight.ndim != nd + 2:
        raise ShapeError(f"{op}: expected {nd + 2}-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{op}: input channels {x.shape[1]} != weight channels {weight.shape[1]} (axis 1)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"{op}: bias shape {bias.shape} != ({weight.shape[0]},)")
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"{op}: padding must be >= 0, got {padding}")
    for ax in range(nd):
        ext = x.shape[2 + ax] + 2 * padding
        if weight.shape[2 + ax] > ext:
            raise ShapeError(
                f"{op}: kernel extent {weight.shape[2 + ax]} exceeds padded input {ext} on spatial axis {ax}"
            )


def _conv(op, x, weight, bias, stride, padding, nd, fwd, grad_in, grad_w):
    parents = (x, weight) if bias is None else (x, weight, bias)
    _unify_dtype(op, *parents)
    _conv_shape_check(op, x, weight, bias, stride, padding, nd)
    pad_spec = ((0, 0), (0, 0)) + ((padding, padding),) * nd
    xp = np.pad(x.data, pad_spec) if padding else np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(weight.data)
    y = fwd(xp, wd, stride)
    if bias is not None:
        y += bias.data.reshape((1, -1) + (1,) * nd)
    padded_spatial = xp.shape[2:]
    kernel_spatial = wd.shape[2:]

    def _back(g):
        g = np.ascontiguousarray(g)
        gx_pad = grad_in(g, wd, stride, *padded_spatial)
        if padding:
            core = (slice(None), slice(None)) + tuple(
                slice(padding, gx_pad.shape[2 + ax] - padding) for ax in range(nd)
            )
            gx = np.ascontiguousarray(gx_pad[core])
        else:
            gx = gx_pad
        gw = grad_w(xp, g, stride, *kernel_spatial)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nd)))

    return Tensor._from_op(y, parents, _back, op)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [N,C,H,W] with [K,C,kh,kw] filters."""
    return _conv(
        "conv2d", x, weight, bias, stride, padding, 2,
        kernels.conv2d_forward, kernels.conv2d_grad_input, kernels.conv2d_grad_weight,
    )


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d cross-correlation of [N,C,D,H,W] with [K,C,kd,kh,kw] filters."""
    return _conv(
        "conv3d", x, weight, bias, stride, padding, 3,
        kernels.conv3d_forward, kernels.conv3d_grad_input, kernels.conv3d_grad_weight,
    )


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Normalize over (batch, spatial) per channel; channel axis is axis 1.

    Train mode normalizes by batch statistics (biased variance) and, when
    running buffers are given, updates them in place with
    ``r = (1 - momentum) * r + momentum * stat`` using the unbiased variance,
    matching the common deep-learning convention. Eval mode requires the
    running buffers and applies ``(x - mu) / sqrt(var + eps) * gamma + beta``.
    """
    _unify_dtype("batch_norm", x, gamma, beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: need a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} must be ({c},) to match input channels"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None and running_var is not None:
            m = xd.size // c
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode requires running statistics")
        mean = np.asarray(running_mean, dtype=xd.dtype)
        var = np.asarray(running_var, dtype=xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m_count = xd.size // c

    def _back(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        scale_ = (gamma.data * inv_std).reshape(bshape)
        if training:
            gx = scale_ * (g - (gb / m_count).reshape(bshape) - xhat * (gg / m_count).reshape(bshape))
        else:
            gx = scale_ * g
        return gx, gg, gb

    return Tensor._from_op(y, (x, gamma, beta), _back, "batch_norm")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no tape); used for turning logits into probs."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -sum(t * log softmax(logits)), log-sum-exp stabilized.

    `targets` rows must each sum to 1 (one-hot or mixed); they are treated as
    constants, so gradients flow to the logits only.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} and targets {t.shape} must be equal 2-d shapes"
        )
    row_sums = t.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(
            f"softmax_cross_entropy: target row {bad} sums to {row_sums[bad]:.8f}, expected 1 within 1e-6"
        )
    x = logits.data
    n = x.shape[0]
    xmax = x.max(axis=1, keepdims=True)
    lse = (xmax + np.log(np.exp(x - xmax).sum(axis=1, keepdims=True))).reshape(-1)
    per_row = lse - (t * x).sum(axis=1)
    loss = np.asarray(per_row.mean(), dtype=x.dtype)
    probs = np.exp(x - lse.reshape(-1, 1))

    def _back(g):
        return (g * (probs - t) / n,)

    return Tensor._from_op(loss, (logits,), _back, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def gradcheck(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must be a deterministic map from a tensor to a scalar. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Use float64 points; step defaults to 1e-4.
    """
    if point.dtype != np.float64:
        raise ValueError("gradcheck requires a float64 point")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ShapeError(f"gradcheck: fn returned shape {tuple(out.shape)}, expected a scalar")
    _check_finite("gradcheck target", out.data)
    backward(out)
    analytic = x.grad.copy()

    flat = point.data.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            probe = point.data.copy().reshape(-1)
            probe[i] = orig + step
            hi = fn(Tensor(probe.reshape(point.shape))).item()
            probe[i] = orig - step
            lo = fn(Tensor(probe.reshape(point.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * step)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom))
