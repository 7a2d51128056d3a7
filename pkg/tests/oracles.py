"""Independent reference implementations the package is checked against."""

import itertools

import numpy as np


def brute_force_otsu(values, nbins=256):
    """Try every bin edge as a cut; split voxels by direct comparison.

    Returns (threshold, score at that threshold, all scores).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(v.min(), v.max(), nbins + 1)[:-1]
    scores = []
    for t in edges:
        hi = v >= t
        lo = ~hi
        if not lo.any() or not hi.any():
            scores.append(0.0)
            continue
        w0, w1 = lo.mean(), hi.mean()
        scores.append(w0 * w1 * (v[lo].mean() - v[hi].mean()) ** 2)
    scores = np.array(scores)
    best = int(np.argmax(scores))
    return float(edges[best]), float(scores[best]), scores


def optimal_matches(iou, tau):
    """Largest one-to-one matching with IoU >= tau, by exhaustive search."""
    n_pred, n_gt = iou.shape
    best = 0
    small, large = (n_pred, n_gt) if n_pred <= n_gt else (n_gt, n_pred)
    table = iou if n_pred <= n_gt else iou.T
    for perm in itertools.permutations(range(large), small):
        hits = sum(table[i, j] >= tau for i, j in enumerate(perm))
        best = max(best, hits)
    return best


def direct_ssim_at(p, t, idx, sigma=1.5, radius=5, data_range=None):
    """SSIM at one voxel from an explicit normalized Gaussian window.

    Borders use symmetric padding (scipy's "reflect" mode).
    """
    r = float(t.max() - t.min()) if data_range is None else data_range
    c1, c2 = (0.01 * r) ** 2, (0.03 * r) ** 2
    off = np.arange(-radius, radius + 1)
    g = np.exp(-(off**2) / (2 * sigma**2))
    g /= g.sum()
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    pp = np.pad(p, radius, mode="symmetric")
    tp = np.pad(t, radius, mode="symmetric")
    sl = tuple(slice(i, i + 2 * radius + 1) for i in idx)
    a, b = pp[sl], tp[sl]
    mu_a, mu_b = (w * a).sum(), (w * b).sum()
    va = (w * (a - mu_a) ** 2).sum()
    vb = (w * (b - mu_b) ** 2).sum()
    cov = (w * (a - mu_a) * (b - mu_b)).sum()
    return (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
