"""Downstream evaluation: watershed nuclei segmentation, AP@IoU, morphology profiles."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.segmentation import relabel_sequential, watershed

from spotlight.errors import ConstantImage, EmptyProfile, ShapeMismatch, ZeroProfile
from spotlight.foreground import foreground_mask, otsu_threshold
from spotlight.metrics import psnr, ssim3d
from spotlight.volume import LabelVolume, Volume, as_array, downscale_half


@dataclass(frozen=True)
class SegConfig:
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 0.01
    seed_min_distance: int = 6
    min_size: int = 268  # (4/3) pi 4^3
    max_size: int = 17157  # (4/3) pi 16^3
    remove_edge_objects: bool = True

    def __post_init__(self):
        object.__setattr__(self, "clahe_tiles", tuple(int(t) for t in self.clahe_tiles))
        if self.min_size < 1 or self.max_size <= self.min_size:
            raise ValueError("need 1 <= min_size < max_size")
        if min(self.clahe_tiles) < 1 or self.seed_min_distance < 1:
            raise ValueError("tiles and seed distance must be positive")


# -- CLAHE ---------------------------------------------------------------------


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a.astype(np.float64) - lo) / (hi - lo)


def _clahe_slice(s: np.ndarray, tiles, clip: float, nbins: int = 256) -> np.ndarray:
    if s.min() == s.max():
        return s.copy()
    ny, nx = s.shape
    ty, tx = min(tiles[0], ny), min(tiles[1], nx)
    ey = np.linspace(0, ny, ty + 1).round().astype(int)
    ex = np.linspace(0, nx, tx + 1).round().astype(int)
    bins = np.minimum((s * nbins).astype(int), nbins - 1)

    lut = np.empty((ty, tx, nbins))
    for i in range(ty):
        for j in range(tx):
            tile = bins[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            limit = clip * tile.size
            excess = np.sum(np.maximum(hist - limit, 0.0))
            hist = np.minimum(hist, limit) + excess / nbins
            lut[i, j] = np.cumsum(hist) / tile.size

    # bilinear blend of the four surrounding tile mappings
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    gy = np.interp(np.arange(ny), cy, np.arange(ty))
    gx = np.interp(np.arange(nx), cx, np.arange(tx))
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (gy - y0)[:, None]
    wx = (gx - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    out = (
        (1 - wy) * (1 - wx) * lut[Y0, X0, bins]
        + (1 - wy) * wx * lut[Y0, X1, bins]
        + wy * (1 - wx) * lut[Y1, X0, bins]
        + wy * wx * lut[Y1, X1, bins]
    )
    return np.clip(out, 0.0, 1.0)


def clahe_slices(v, tiles=(8, 8), clip: float = 0.01) -> Volume:
    """Contrast-limited adaptive histogram equalization of every z-slice.

    The volume is first min-max normalized as a whole; the output lies in [0, 1].
    """
    vol = v if isinstance(v, Volume) else Volume(np.asarray(v, dtype=np.float64))
    norm = _normalize(vol.data)
    out = np.stack([_clahe_slice(s, tiles, clip) for s in norm])
    return vol.with_data(out)


# -- segmentation ----------------------------------------------------------------


def _even_crop(a: np.ndarray) -> np.ndarray:
    return a[tuple(slice(0, d - d % 2) for d in a.shape)]


def segment_watershed(v, cfg: SegConfig = SegConfig()) -> LabelVolume:
    """Otsu + distance-transform watershed on the half-resolution volume.

    Labels are upscaled back to the input grid by nearest neighbour.
    """
    vol = v if isinstance(v, Volume) else Volume(np.asarray(v, dtype=np.float64))
    data = vol.data
    if data.min() == data.max():
        raise ConstantImage("cannot segment a constant volume")
    small = downscale_half(Volume(_even_crop(data), vol.voxel_size))
    if small.data.min() == small.data.max():
        raise ConstantImage("volume is constant after downscaling")
    eq = clahe_slices(small, cfg.clahe_tiles, cfg.clahe_clip)
    mask = foreground_mask(eq, otsu_threshold(eq).threshold).bits
    mask = ndimage.binary_fill_holes(mask)
    dist = ndimage.distance_transform_edt(mask)
    components, _ = ndimage.label(mask)
    peaks = peak_local_max(
        dist, min_distance=cfg.seed_min_distance, labels=components, exclude_border=False
    )
    markers = np.zeros(mask.shape, np.int32)
    markers[tuple(peaks.T)] = np.arange(1, len(peaks) + 1)
    small_labels = watershed(-dist, markers, mask=mask)
    up = small_labels.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    full = np.zeros(data.shape, np.uint32)
    full[tuple(slice(0, d) for d in up.shape)] = up
    return LabelVolume(relabel_sequential(full)[0], vol.voxel_size)


def _touching_faces(labels: np.ndarray) -> np.ndarray:
    faces = [labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0], labels[:, :, -1]]
    ids = np.unique(np.concatenate([f.ravel() for f in faces]))
    return ids[ids > 0]


def _fill_instance_holes(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        inst = labels[sl] == lab
        filled = ndimage.binary_fill_holes(inst)
        add = filled & ~inst & (labels[sl] == 0)
        if add.any():
            out[sl][add] = lab
    return out


def _postprocess_once(labels: np.ndarray, cfg: SegConfig) -> np.ndarray:
    labels = relabel_sequential(labels)[0]
    if cfg.remove_edge_objects:
        edge = _touching_faces(labels)
        labels = np.where(np.isin(labels, edge), 0, labels)
    labels = _fill_instance_holes(labels)
    counts = np.bincount(labels.ravel())
    bad = np.nonzero((counts < cfg.min_size) | (counts > cfg.max_size))[0]
    bad = bad[bad > 0]
    labels = np.where(np.isin(labels, bad), 0, labels)
    return relabel_sequential(labels)[0].astype(np.uint32)


def postprocess(labels, cfg: SegConfig = SegConfig()) -> LabelVolume:
    """Drop edge-touching instances, fill holes, size-filter, relabel 1..n.

    Repeated until nothing changes, which makes the operation idempotent.
    """
    lv = labels if isinstance(labels, LabelVolume) else LabelVolume(np.asarray(labels))
    cur = lv.labels.astype(np.uint32)
    for _ in range(10):
        nxt = _postprocess_once(cur, cfg)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    return LabelVolume(cur, lv.voxel_size)


# -- AP@IoU ------------------------------------------------------------------------


def iou_table(pred, gt) -> np.ndarray:
    """IoU between every predicted (rows) and ground-truth (columns) instance."""
    p = relabel_sequential(np.asarray(as_array(pred)).astype(np.int64))[0]
    g = relabel_sequential(np.asarray(as_array(gt)).astype(np.int64))[0]
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    n_p, n_g = int(p.max()), int(g.max())
    overlap = np.bincount(
        (p.ravel() * (n_g + 1) + g.ravel()), minlength=(n_p + 1) * (n_g + 1)
    ).reshape(n_p + 1, n_g + 1)
    size_p = overlap.sum(axis=1, keepdims=True)
    size_g = overlap.sum(axis=0, keepdims=True)
    union = size_p + size_g - overlap
    iou = np.divide(overlap, union, out=np.zeros(overlap.shape), where=union > 0)
    return iou[1:, 1:]


def greedy_match(iou: np.ndarray, tau: float) -> int:
    """One-to-one matches accepted in descending IoU order; returns the count."""
    cand = np.argwhere((iou >= tau) & (iou > 0))
    if cand.size == 0:
        return 0
    scores = iou[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
    used_p, used_g = set(), set()
    for i, j in cand[order]:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)


@dataclass(frozen=True)
class APResult:
    tau: float
    tp: int
    fp: int
    fn: int
    ap: float


def ap_table(pred, gt, taus: Sequence[float]) -> list[APResult]:
    iou = iou_table(pred, gt)
    n_p, n_g = iou.shape
    out = []
    for tau in taus:
        tp = greedy_match(iou, tau) if n_p and n_g else 0
        fp, fn = n_p - tp, n_g - tp
        denom = tp + fp + fn
        ap = 1.0 if denom == 0 else tp / denom
        out.append(APResult(float(tau), tp, fp, fn, ap))
    return out


def average_precision(pred, gt, taus: Sequence[float]) -> list[float]:
    """TP / (TP + FP + FN) at each IoU threshold."""
    return [r.ap for r in ap_table(pred, gt, taus)]


# -- morphology ----------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceFeatures:
    label: int
    volume: float
    equivalent_diameter: float
    surface_area: float
    sphericity: float
    extent: float
    axis_major: float
    axis_mid: float
    axis_minor: float
    elongation: float
    mean_intensity: float
    max_intensity: float

    def vector(self) -> np.ndarray:
        return np.array(astuple(self)[1:], dtype=np.float64)


FEATURE_NAMES = tuple(f.name for f in fields(InstanceFeatures))[1:]


def _surface_area(inst: np.ndarray) -> int:
    padded = np.pad(inst, 1).astype(np.int8)
    return int(sum(np.abs(np.diff(padded, axis=a)).sum() for a in range(3)))


def extract_features(labels, intensity) -> list[InstanceFeatures]:
    """Per-instance morphology, ordered by label id.

    Principal axis lengths are 2*sqrt(eigenvalues) of the coordinate
    covariance, where every voxel counts as a unit cube (adds 1/12 per axis).
    """
    lab = np.asarray(as_array(labels))
    img = np.asarray(as_array(intensity), dtype=np.float64)
    if lab.shape != img.shape:
        raise ShapeMismatch(f"labels {lab.shape} vs intensity {img.shape}")
    out = []
    for lab_id, sl in enumerate(ndimage.find_objects(lab.astype(np.int64)), start=1):
        if sl is None:
            continue
        inst = lab[sl] == lab_id
        vol = float(inst.sum())
        area = float(_surface_area(inst))
        coords = np.argwhere(inst).astype(np.float64)
        cov = np.cov(coords.T, bias=True) if len(coords) > 1 else np.zeros((3, 3))
        eig = np.sort(np.linalg.eigvalsh(np.atleast_2d(cov) + np.eye(3) / 12.0))[::-1]
        axes = 2.0 * np.sqrt(np.clip(eig, 0.0, None))
        bbox = float(np.prod([s.stop - s.start for s in sl]))
        vals = img[sl][inst]
        out.append(
            InstanceFeatures(
                label=lab_id,
                volume=vol,
                equivalent_diameter=(6.0 * vol / math.pi) ** (1.0 / 3.0),
                surface_area=area,
                sphericity=math.pi ** (1.0 / 3.0) * (6.0 * vol) ** (2.0 / 3.0) / area,
                extent=vol / bbox,
                axis_major=float(axes[0]),
                axis_mid=float(axes[1]),
                axis_minor=float(axes[2]),
                elongation=float(axes[0] / axes[2]),
                mean_intensity=float(vals.mean()),
                max_intensity=float(vals.max()),
            )
        )
    return out


def profile_vector(feats: Sequence[InstanceFeatures]) -> np.ndarray:
    if not feats:
        raise EmptyProfile("no instances to profile")
    return np.mean([f.vector() for f in feats], axis=0)


def profile_distance(a: Sequence[InstanceFeatures], b: Sequence[InstanceFeatures]) -> float:
    """Cosine distance between the per-feature mean profiles."""
    pa, pb = profile_vector(a), profile_vector(b)
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    if na == 0 or nb == 0:
        raise ZeroProfile("profile vector has zero norm")
    return float(1.0 - np.dot(pa, pb) / (na * nb))


# -- threshold sweep -------------------------------------------------------------------


def clamp_below(pred: np.ndarray, t: float) -> np.ndarray:
    return np.where(pred < t, pred.min(), pred)


def segment_and_score(pred, gt_labels, cfg: SegConfig, taus) -> tuple[LabelVolume, list[APResult]]:
    data = np.asarray(as_array(pred))
    try:
        seg = postprocess(segment_watershed(data, cfg), cfg)
    except ConstantImage:
        seg = LabelVolume(np.zeros(data.shape, np.uint32))
    return seg, ap_table(seg, gt_labels, taus)


def threshold_sweep(
    pred,
    thresholds: Sequence[float],
    gt_labels,
    gt_target,
    cfg: SegConfig = SegConfig(),
    taus: Sequence[float] = (0.5,),
    fg_mask=None,
) -> list[tuple]:
    """Clamp the prediction below each threshold, then segment and score it.

    Returns rows (threshold, metric, scope, value); the unthresholded
    prediction is reported first with threshold ``-inf``.
    """
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    data = np.asarray(as_array(pred), dtype=np.float64)
    target = np.asarray(as_array(gt_target), dtype=np.float64)
    rows = []
    for t in [-math.inf, *thresholds]:
        clamped = data if t == -math.inf else clamp_below(data, t)
        _, aps = segment_and_score(clamped, gt_labels, cfg, taus)
        for r in aps:
            rows.append((t, f"ap@{r.tau:g}", "whole", r.ap))
        rows.append((t, "psnr", "whole", psnr(clamped, target)))
        rows.append((t, "ssim", "whole", ssim3d(clamped, target)))
        if fg_mask is not None:
            rows.append((t, "psnr", "fg", psnr(clamped, target, fg_mask)))
            rows.append((t, "ssim", "fg", ssim3d(clamped, target, fg_mask)))
    return rows
