"""Manifold mixup at the fusion layer.

One interpolation coefficient is drawn per batch from Beta(alpha, alpha) and
the batch is paired against a uniformly random in-batch shuffle (self-pairs
permitted). Feature rows are mixed convexly; the loss is the matching convex
combination of the cross-entropies against the two label sets, which equals
cross-entropy against the mixed label because the loss is linear in the
target.

The endpoints lam == 1.0 and lam == 0.0 short-circuit to the exact unmixed
graph, so a forced-endpoint step is bitwise identical to mixup-disabled
training (no signed-zero or rounding residue from multiplying by 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class MixupConfig:
    alpha: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"mixup alpha must be > 0, got {self.alpha}")


@dataclass
class MixedBatch:
    lam: float
    pair_index: np.ndarray
    features: Tensor  # lam * z + (1 - lam) * z[pair_index]
    labels_a: np.ndarray  # one-hot rows y_i
    labels_b: np.ndarray  # one-hot rows y_j = y[pair_index]


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    """Draw the batch interpolation coefficient from Beta(alpha, alpha)."""
    if cfg.alpha <= 0:
        raise ValueError(f"mixup alpha must be > 0, got {cfg.alpha}")
    return float(rng.beta(cfg.alpha, cfg.alpha))


def sample_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random in-batch pairing (a permutation; fixed points allowed)."""
    return rng.permutation(n)


def _check_pairing(pair_index: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(pair_index)
    if idx.shape != (n,) or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ValueError(f"pair_index must be a permutation of range({n})")
    return idx


def mix_features(z: Tensor, labels_onehot: np.ndarray, lam: float, pair_index: np.ndarray) -> MixedBatch:
    """Convexly combine feature rows (and pair up labels) per the mixing rule.

    Gradient flows to both source rows with weights lam and 1 - lam via the
    gather's scatter-add backward.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    n = z.shape[0]
    idx = _check_pairing(pair_index, n)
    y = np.asarray(labels_onehot)
    if lam == 1.0:
        mixed = z
    elif lam == 0.0:
        mixed = T.gather_rows(z, idx)
    else:
        mixed = T.add(T.scale(z, lam), T.scale(T.gather_rows(z, idx), 1.0 - lam))
    return MixedBatch(lam=lam, pair_index=idx, features=mixed, labels_a=y, labels_b=y[idx])


def mixed_loss(logits: Tensor, labels_a: np.ndarray, labels_b: np.ndarray, lam: float) -> Tensor:
    """lam * CE(logits, y_i) + (1 - lam) * CE(logits, y_j) on the mixed-batch logits."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return T.softmax_cross_entropy(logits, labels_a)
    if lam == 0.0:
        return T.softmax_cross_entropy(logits, labels_b)
    loss_a = T.softmax_cross_entropy(logits, labels_a)
    loss_b = T.softmax_cross_entropy(logits, labels_b)
    return T.add(T.scale(loss_a, lam), T.scale(loss_b, 1.0 - lam))
