"""Self-contained SVG intensity histograms (log-scale counts, dashed threshold lines)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from spotlight.volume import as_array

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def intensity_histograms(volumes, bins: int = 100) -> tuple[np.ndarray, list[np.ndarray]]:
    """Shared bin edges over all volumes and the voxel counts of each volume."""
    arrays = [np.asarray(as_array(v), dtype=np.float64).ravel() for v in volumes]
    if not arrays:
        raise ValueError("need at least one volume")
    lo = min(a.min() for a in arrays)
    hi = max(a.max() for a in arrays)
    if hi == lo:
        edges = np.array([lo - 0.5, lo + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    return edges, [np.histogram(a, edges)[0] for a in arrays]


def render_histogram_svg(
    volumes,
    thresholds: Sequence[float] = (),
    labels: Sequence[str] = (),
    title: str = "",
    bins: int = 100,
    width: int = 640,
    height: int = 400,
) -> str:
    edges, counts = intensity_histograms(volumes, bins)
    margin = 50
    pw, ph = width - 2 * margin, height - 2 * margin
    lo, hi = float(edges[0]), float(edges[-1])
    top = max(math.log10(c.max() + 1) for c in counts) or 1.0

    def sx(v):
        return margin + (v - lo) / (hi - lo) * pw

    def sy(c):
        return margin + ph - math.log10(c + 1) / top * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle">{title}</text>')
    centers = (edges[:-1] + edges[1:]) / 2
    for i, c in enumerate(counts):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(n):.2f}" for x, n in zip(centers, c))
        if len(c) == 1:
            x0, x1 = sx(edges[0]), sx(edges[1])
            pts = f"{x0:.2f},{sy(c[0]):.2f} {x1:.2f},{sy(c[0]):.2f}"
        parts.append(f'<polyline class="hist" points="{pts}" fill="none" stroke="{color}"/>')
        if i < len(labels):
            parts.append(
                f'<text x="{width - margin - 5}" y="{margin + 15 * (i + 1)}" text-anchor="end" '
                f'fill="{color}">{labels[i]}</text>'
            )
    for t in thresholds:
        if lo <= t <= hi:
            x = sx(t)
            parts.append(
                f'<line class="threshold" x1="{x:.2f}" y1="{margin}" x2="{x:.2f}" '
                f'y2="{margin + ph}" stroke="black" stroke-dasharray="4,3"/>'
            )
    parts.append(f'<text x="{margin}" y="{height - 15}">{lo:.3g}</text>')
    parts.append(f'<text x="{width - margin}" y="{height - 15}" text-anchor="end">{hi:.3g}</text>')
    parts.append(f'<text x="10" y="{margin}">log10(count+1)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_histogram_svg(volumes, thresholds, path, **kwargs) -> Path:
    path = Path(path)
    path.write_text(render_histogram_svg(volumes, thresholds, **kwargs))
    return path
