"""Binary cross-entropy and spatiotemporal-correlation (STC) losses.

The STC loss reweights cross-entropy per voxel with ``w = sigmoid(sum of
neighbour confidences)`` over a ``k x k x tau`` box: supported positives cost
more to miss, isolated negatives cost more to keep. By default ``w`` is treated
as a constant for differentiation and the centre voxel is not its own
neighbour; both can be switched off.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from evspseg.sparse_ops import sigmoid

EPS = 1e-7


@dataclass(frozen=True)
class STCConfig:
    k: int = 3
    tau: int = 5
    gamma: float = 2.0
    exclude_center: bool = True
    detach_weights: bool = True

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and positive, got {self.k}")
        if self.tau < 1:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    def offsets(self):
        h = (self.k - 1) // 2
        lo_t, hi_t = -((self.tau - 1) // 2), self.tau // 2
        for off in itertools.product(range(-h, h + 1), range(-h, h + 1), range(lo_t, hi_t + 1)):
            if off == (0, 0, 0) and self.exclude_center:
                continue
            yield off


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def bce_terms(p, y):
    p = _clamp(p)
    y = np.asarray(y)
    return np.where(y == 1, -np.log(p), -np.log1p(-p))


def bce_loss(p, y):
    """Mean binary cross-entropy; a scalar input gives the per-sample value."""
    terms = bce_terms(p, y)
    return float(terms.mean()) if terms.size else 0.0


def neighbor_sums(grid, conf, cfg):
    """Sum of ``conf`` over active voxels in each voxel's STC box."""
    conf = np.asarray(conf, dtype=np.float64)
    s = np.zeros(len(grid))
    for off in cfg.offsets():
        out_rows, in_rows = grid.geometry.neighbor_pairs(off)
        if len(out_rows):
            s[out_rows] += conf[in_rows]
    return s


def stc_weights(grid, conf, cfg=STCConfig()):
    return sigmoid(neighbor_sums(grid, conf, cfg))


def stc_terms(p, y, w, gamma):
    p = _clamp(p)
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    return np.where(y == 1, -(w ** gamma) * np.log(p), -((1.0 - w) ** gamma) * np.log1p(-p))


def stc_loss(conf, targets, weights, gamma=2.0):
    """Mean STC loss for fixed weights."""
    terms = stc_terms(conf, targets, weights, gamma)
    return float(terms.mean()) if terms.size else 0.0


def stc_loss_grad(conf, targets, weights, gamma=2.0):
    """d(mean STC loss)/d(conf) with the weights held fixed."""
    p = _clamp(conf)
    y = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    n = max(len(p), 1)
    return np.where(y == 1, -(w ** gamma) / p, ((1.0 - w) ** gamma) / (1.0 - p)) / n


def _weight_terms(p, y, w, gamma):
    """d(per-voxel term)/dw."""
    p = _clamp(p)
    if gamma == 0:
        return np.zeros_like(w)
    return np.where(y == 1, -gamma * w ** (gamma - 1) * np.log(p),
                    gamma * (1.0 - w) ** (gamma - 1) * np.log1p(-p))


def objective(grid, logits, targets, loss="stc", cfg=STCConfig(), weights=None):
    """Mean loss and its gradient w.r.t. the per-voxel logits.

    The gradient is taken analytically in logit space so it does not vanish
    where the clamped confidence saturates. ``weights`` fixes the STC weights
    instead of deriving them from the current confidences.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = sigmoid(z)
    y = np.asarray(targets)
    n = max(len(z), 1)
    if loss == "bce":
        value = bce_loss(p, y)
        return value, (p - y) / n
    if loss != "stc":
        raise ValueError(f"unknown loss {loss!r}")
    w = stc_weights(grid, p, cfg) if weights is None else np.asarray(weights, dtype=np.float64)
    value = stc_loss(p, y, w, cfg.gamma)
    a = w ** cfg.gamma
    b = (1.0 - w) ** cfg.gamma
    dz = np.where(y == 1, -a * (1.0 - p), b * p) / n
    if not cfg.detach_weights and weights is None:
        dz += _weight_path(grid, p, y, w, cfg) * p * (1.0 - p)
    return value, dz


def _weight_path(grid, p, y, w, cfg):
    """Gradient w.r.t. conf flowing through the neighbour weights."""
    ds = _weight_terms(p, y, w, cfg.gamma) * w * (1.0 - w) / max(len(p), 1)
    dp = np.zeros(len(p))
    for off in cfg.offsets():
        out_rows, in_rows = grid.geometry.neighbor_pairs(off)
        if len(out_rows):
            dp[in_rows] += ds[out_rows]
    return dp


def stc_objective_conf(grid, conf, targets, cfg=STCConfig()):
    """Mean STC loss as a function of confidences, with d/d(conf).

    Honours ``cfg.detach_weights``: when False the weights are recomputed from
    ``conf`` and differentiated through.
    """
    p = np.asarray(conf, dtype=np.float64)
    y = np.asarray(targets)
    w = stc_weights(grid, p, cfg)
    value = stc_loss(p, y, w, cfg.gamma)
    grad = stc_loss_grad(p, y, w, cfg.gamma)
    if not cfg.detach_weights:
        grad = grad + _weight_path(grid, p, y, w, cfg)
    return value, grad
