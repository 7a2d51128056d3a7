"""Histogram foreground estimation: Otsu threshold, masks, T-centered standardization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spotlight.errors import ConstantImage
from spotlight.volume import MaskVolume, Volume, as_array

#: minimum foreground fraction for a training patch to be accepted
MIN_FG_FRACTION = 0.001


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    bin_edges: np.ndarray
    inter_class_variance: np.ndarray
    cut: int  # index of the first bin of the upper class


def histogram_bins(values: np.ndarray, nbins: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bin edges over [min, max] and the bin index of every value.

    Bin membership is decided by comparison against the edges, so
    ``values >= edges[c]`` holds exactly for the voxels in bins ``c`` and above.
    """
    lo, hi = float(values.min()), float(values.max())
    edges = np.linspace(lo, hi, nbins + 1)
    idx = np.searchsorted(edges, values, side="right") - 1
    np.clip(idx, 0, nbins - 1, out=idx)
    return edges, idx


def otsu_threshold(v, nbins: int = 256) -> OtsuResult:
    """Cut maximizing the between-class variance w0*w1*(mu0-mu1)**2.

    Candidate thresholds are the lower edges of bins 0..nbins-1; class means
    use the actual voxel values, not bin centres. Ties go to the smallest edge.
    """
    values = np.asarray(as_array(v), dtype=np.float64).ravel()
    if values.size == 0 or values.min() == values.max():
        raise ConstantImage("Otsu threshold needs at least two distinct values")
    edges, idx = histogram_bins(values, nbins)
    counts = np.bincount(idx, minlength=nbins).astype(np.float64)
    sums = np.bincount(idx, weights=values, minlength=nbins)

    # lower class = bins [0, c), upper class = bins [c, nbins)
    n_lo = np.concatenate(([0.0], np.cumsum(counts)[:-1]))
    s_lo = np.concatenate(([0.0], np.cumsum(sums)[:-1]))
    n_total, s_total = counts.sum(), sums.sum()
    n_hi = n_total - n_lo
    s_hi = s_total - s_lo
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_lo = np.where(n_lo > 0, s_lo / n_lo, 0.0)
        mu_hi = np.where(n_hi > 0, s_hi / n_hi, 0.0)
    w_lo, w_hi = n_lo / n_total, n_hi / n_total
    score = w_lo * w_hi * (mu_lo - mu_hi) ** 2
    score[(n_lo == 0) | (n_hi == 0)] = 0.0
    cut = int(np.argmax(score))  # first maximum == smallest threshold
    return OtsuResult(float(edges[cut]), edges, score, cut)


def foreground_mask(v, t: float) -> MaskVolume:
    return MaskVolume(as_array(v) >= t)


def fg_fraction(m) -> float:
    bits = as_array(m)
    return float(np.count_nonzero(bits)) / bits.size


def standardize(v, t: float) -> tuple[Volume, float]:
    """Center at ``t`` and scale by the population standard deviation.

    Returns the standardized volume and the scale so callers can invert it.
    """
    vol = v if isinstance(v, Volume) else Volume(np.asarray(v))
    sigma = float(np.std(vol.data, dtype=np.float64))
    if sigma == 0.0:
        raise ConstantImage("cannot standardize a constant volume")
    out = ((vol.data.astype(np.float64) - t) / sigma).astype(vol.data.dtype)
    return vol.with_data(out), sigma


def standardize_mean(v) -> tuple[Volume, float, float]:
    """Classical mean/std standardization used for inputs and the MSE baseline."""
    vol = v if isinstance(v, Volume) else Volume(np.asarray(v))
    mean = float(np.mean(vol.data, dtype=np.float64))
    out, sigma = standardize(vol, mean)
    return out, mean, sigma
