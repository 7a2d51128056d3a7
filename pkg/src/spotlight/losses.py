"""Foreground-aware losses with analytic gradients w.r.t. the prediction.

All reductions run in float64; gradients are cast back to the prediction's
dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spotlight.errors import EmptyMask, InvalidSharpness, ShapeMismatch
from spotlight.volume import as_array


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    k: float = -0.95
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        _check_sharpness(self.k)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _check_sharpness(k: float) -> None:
    if not -1.0 < k <= 0.0:
        raise InvalidSharpness(f"sharpness k must lie in (-1, 0], got {k}")


def soft_threshold(x, k: float = -0.95):
    """Normalized tunable sigmoid (x - kx) / (k - 2k|x| + 1).

    Odd, strictly increasing, with fixed points at -1, 0 and 1. For
    k in (-1, 0] the denominator equals (1 + k) + 2|k||x| > 0.
    """
    _check_sharpness(k)
    x = np.asarray(as_array(x), dtype=np.float64)
    return (x - k * x) / (k - 2.0 * k * np.abs(x) + 1.0)


def soft_threshold_grad(x, k: float = -0.95):
    """Derivative (1 - k^2) / (k - 2k|x| + 1)^2."""
    _check_sharpness(k)
    x = np.asarray(as_array(x), dtype=np.float64)
    return (1.0 - k * k) / (k - 2.0 * k * np.abs(x) + 1.0) ** 2


def _prepare(pred, target=None, mask=None):
    p = as_array(pred)
    out = [np.asarray(p, dtype=np.float64)]
    for other in (target, mask):
        if other is None:
            continue
        a = as_array(other)
        if a.shape != p.shape:
            raise ShapeMismatch(f"shape {a.shape} does not match prediction {p.shape}")
        out.append(a)
    return p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64, out


def _mask_count(m: np.ndarray) -> tuple[np.ndarray, float]:
    m = m.astype(bool)
    n = float(np.count_nonzero(m))
    if n == 0:
        raise EmptyMask("foreground mask has no voxels")
    return m, n


def masked_mse(pred, target, m) -> LossResult:
    dtype, (p, y, mask) = _prepare(pred, target, m)
    mask, n = _mask_count(mask)
    diff = np.where(mask, p - np.asarray(y, dtype=np.float64), 0.0)
    value = float(np.sum(diff * diff) / n)
    return LossResult(value, (2.0 / n * diff).astype(dtype))


def plain_mse(pred, target) -> LossResult:
    """Unmasked MSE over every voxel (the baseline objective)."""
    dtype, (p, y) = _prepare(pred, target)
    diff = p - np.asarray(y, dtype=np.float64)
    n = diff.size
    return LossResult(float(np.sum(diff * diff) / n), (2.0 / n * diff).astype(dtype))


def dice_loss(pred, m, cfg: LossConfig = LossConfig()) -> LossResult:
    """Dice loss between the rectified soft-thresholded prediction and the mask.

    ``s = max(sigma_k(pred), 0)``; the sub-gradient at the rectification kink
    (pred == 0) is taken as zero.
    """
    dtype, (p, mask) = _prepare(pred, m)
    mask, n_fg = _mask_count(mask)
    sk = soft_threshold(p, cfg.k)
    active = sk > 0
    s = np.where(active, sk, 0.0)
    overlap = float(np.sum(s[mask]))
    denom = float(np.sum(s)) + n_fg + cfg.epsilon
    value = 1.0 - 2.0 * overlap / denom
    ds = 2.0 * overlap / denom**2 - 2.0 * mask / denom
    grad = np.where(active, ds * soft_threshold_grad(p, cfg.k), 0.0)
    return LossResult(value, grad.astype(dtype))


def spotlight_loss(pred, target, m, cfg: LossConfig = LossConfig()) -> LossResult:
    """lam * masked MSE + (1 - lam) * Dice."""
    mmse = masked_mse(pred, target, m)
    dice = dice_loss(pred, m, cfg)
    value = cfg.lam * mmse.value + (1.0 - cfg.lam) * dice.value
    grad = cfg.lam * mmse.grad.astype(np.float64) + (1.0 - cfg.lam) * dice.grad.astype(np.float64)
    return LossResult(value, grad.astype(mmse.grad.dtype))
