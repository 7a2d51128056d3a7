"""Image-quality metrics: PSNR, 3D SSIM and Fourier ring correlation resolution."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from spotlight.errors import ConstantRange, EmptyMask, ShapeMismatch
from spotlight.volume import Volume, as_array

#: PSNR of a perfect prediction
PSNR_PERFECT = math.inf
#: FRC resolution when the curves are uncorrelated from the first ring on
NO_CORRELATION = math.inf
FRC_THRESHOLD = 1.0 / 7.0
NYQUIST_PX = 2.0


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    psnr_fg_db: float
    ssim: float
    ssim_fg: float
    frc_resolution_px: float

    def rows(self, sample_id: str) -> list[tuple]:
        return [
            (sample_id, "psnr", "whole", self.psnr_db),
            (sample_id, "psnr", "fg", self.psnr_fg_db),
            (sample_id, "ssim", "whole", self.ssim),
            (sample_id, "ssim", "fg", self.ssim_fg),
            (sample_id, "frc_resolution_px", "whole", self.frc_resolution_px),
        ]


def _pair(pred, target):
    p = np.asarray(as_array(pred), dtype=np.float64)
    t = np.asarray(as_array(target), dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    return p, t


def _mask(mask, shape) -> Optional[np.ndarray]:
    if mask is None:
        return None
    m = np.asarray(as_array(mask), dtype=bool)
    if m.shape != shape:
        raise ShapeMismatch(f"mask {m.shape} vs volume {shape}")
    if not m.any():
        raise EmptyMask("metric mask is empty")
    return m


def rescale_to_target_range(pred, train_min: float, train_max: float, std_min: float, std_max: float):
    """Affine map from standardized units back to raw intensities.

    ``std_min``/``std_max`` are the extremes of the standardized training
    targets; they land on ``train_min``/``train_max``.
    """
    if not train_max > train_min or not std_max > std_min:
        raise ConstantRange("degenerate intensity range for rescaling")
    scale = (train_max - train_min) / (std_max - std_min)
    data = np.asarray(as_array(pred), dtype=np.float64)
    out = train_min + (data - std_min) * scale
    if isinstance(pred, Volume):
        return pred.with_data(out.astype(pred.data.dtype))
    return out


def psnr(pred, target, mask=None) -> float:
    """10 log10(R^2 / MSE), R = full target range; MSE over the mask when given."""
    p, t = _pair(pred, target)
    m = _mask(mask, p.shape)
    r = float(t.max() - t.min())
    err = (p - t) ** 2
    mse = float(err[m].mean() if m is not None else err.mean())
    if mse == 0.0:
        return PSNR_PERFECT
    if r == 0.0:
        return -math.inf
    return 10.0 * math.log10(r * r / mse)


def ssim_map(
    pred, target, sigma: float = 1.5, data_range: Optional[float] = None, mask=None
) -> np.ndarray:
    """Local SSIM with a Gaussian window; R defaults to the target range.

    With a mask the local statistics are mask-weighted (normalized
    convolution), so voxels outside the mask have no influence; the map is
    only meaningful on mask voxels.
    """
    p, t = _pair(pred, target)
    m = _mask(mask, p.shape)
    r = float(t.max() - t.min()) if data_range is None else data_range
    c1, c2 = (0.01 * r) ** 2, (0.03 * r) ** 2
    if r == 0.0:
        c1 = c2 = 1e-12

    def gauss(a):
        return ndimage.gaussian_filter(a, sigma, truncate=3.0, mode="reflect")

    if m is None:
        blur = gauss
    else:
        w = m.astype(np.float64)
        norm = np.maximum(gauss(w), 1e-300)

        def blur(a):
            return gauss(a * w) / norm

    mu_p, mu_t = blur(p), blur(t)
    var_p = blur(p * p) - mu_p**2
    var_t = blur(t * t) - mu_t**2
    cov = blur(p * t) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return num / den


def ssim3d(pred, target, mask=None) -> float:
    """Mean local SSIM (Gaussian window sigma 1.5 truncated at 3 sigma)."""
    p, t = _pair(pred, target)
    m = _mask(mask, p.shape)
    if np.array_equal(p, t):
        return 1.0
    if m is None:
        return float(ssim_map(p, t).mean())
    return float(ssim_map(p, t, mask=m)[m].mean())


def frc_curve(pred, target, bin_delta: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Slice-averaged Fourier ring correlation.

    Each z-slice pair is zero-padded to a common square, transformed, and the
    normalized cross-power is summed over rings ``bin_delta`` frequency
    samples wide. Returns (ring centre frequency in cycles/px, FRC).
    """
    p, t = _pair(pred, target)
    _, ny, nx = p.shape
    n = max(ny, nx)
    fy = np.fft.fftfreq(n) * n
    radius = np.sqrt(fy[:, None] ** 2 + fy[None, :] ** 2)
    ring = (radius // bin_delta).astype(int)
    n_rings = (n // 2) // bin_delta
    if n_rings < 1:
        raise ShapeMismatch(f"slices of size {n} too small for bin_delta={bin_delta}")
    valid = ring < n_rings
    ring_idx = ring[valid]

    curves = []
    for zp, zt in zip(p, t):
        pp = np.zeros((n, n))
        tt = np.zeros((n, n))
        pp[:ny, :nx] = zp
        tt[:ny, :nx] = zt
        fp = np.fft.fft2(pp)[valid]
        ft = np.fft.fft2(tt)[valid]
        cross = np.bincount(ring_idx, (fp * np.conj(ft)).real, minlength=n_rings)
        pow_p = np.bincount(ring_idx, np.abs(fp) ** 2, minlength=n_rings)
        pow_t = np.bincount(ring_idx, np.abs(ft) ** 2, minlength=n_rings)
        denom = np.sqrt(pow_p * pow_t)
        if np.any(denom == 0):
            continue  # blank slice: correlation undefined
        curves.append(cross / denom)
    freqs = (np.arange(n_rings) + 0.5) * bin_delta / n
    if not curves:
        return freqs, np.zeros(n_rings)
    return freqs, np.mean(curves, axis=0)


def frc_resolution(pred, target, bin_delta: int = 5) -> float:
    """Resolution in pixels at the first 1/7 crossing of the FRC curve.

    Returns the Nyquist floor (2 px) if the curve never drops below 1/7 and
    :data:`NO_CORRELATION` if it starts below it.
    """
    p, t = _pair(pred, target)
    if min(p.shape[1:]) < 16:
        raise ShapeMismatch("FRC needs xy extents of at least 16")
    freqs, curve = frc_curve(p, t, bin_delta)
    below = np.nonzero(curve < FRC_THRESHOLD)[0]
    if below.size == 0:
        return NYQUIST_PX
    i = int(below[0])
    if i == 0:
        return NO_CORRELATION
    f0, f1 = freqs[i - 1], freqs[i]
    c0, c1 = curve[i - 1], curve[i]
    fc = f0 + (f1 - f0) * (c0 - FRC_THRESHOLD) / (c0 - c1)
    return max(NYQUIST_PX, 1.0 / fc)


def evaluate(pred, target, fg_mask, bin_delta: int = 5) -> MetricReport:
    return MetricReport(
        psnr_db=psnr(pred, target),
        psnr_fg_db=psnr(pred, target, fg_mask),
        ssim=ssim3d(pred, target),
        ssim_fg=ssim3d(pred, target, fg_mask),
        frc_resolution_px=frc_resolution(pred, target, bin_delta),
    )


def write_metric_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "metric", "scope", "value"])
        for row in rows:
            writer.writerow([*row[:-1], format_value(row[-1])])


def format_value(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    return str(value)
