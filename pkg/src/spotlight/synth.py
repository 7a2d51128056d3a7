"""Seeded synthetic nuclei phantoms: label-free proxy input, fluorescence target, labels.

The target reproduces the artifacts that hurt pixel-wise training: an
anisotropic PSF that smears nuclei along z, a low-frequency background ramp
and white noise. The input is an edge image of the clean (pre-PSF) nuclei, so
the input -> target mapping is learnable but not an identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from spotlight.errors import PlacementFailed
from spotlight.volume import LabelVolume, Volume

# relative intensity drop from nucleus centre to rim
RADIAL_FALLOFF = 0.3
PLACEMENT_ATTEMPTS = 2000


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (48, 128, 128)
    n_nuclei: int = 8
    radius_range: tuple[float, float] = (6.0, 12.0)
    axial_elongation_sigma_ratio: float = 3.0
    psf_sigma_xy: float = 1.0
    bg_noise_sigma: float = 0.05
    bg_gradient_amplitude: float = 0.1
    fg_intensity: float = 1.0
    input_noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        lo, hi = self.radius_range
        if lo < 2 or hi < lo:
            raise ValueError(f"radius range must satisfy 2 <= lo <= hi, got {self.radius_range}")
        if self.n_nuclei < 0:
            raise ValueError("n_nuclei must be >= 0")
        sigmas = (
            self.axial_elongation_sigma_ratio,
            self.psf_sigma_xy,
            self.bg_noise_sigma,
            self.input_noise_sigma,
        )
        if min(sigmas) < 0:
            raise ValueError("sigmas must be >= 0")


@dataclass(frozen=True)
class Nucleus:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray  # columns are the ellipsoid axes in (z, y, x)

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))


@dataclass(frozen=True)
class SynthSample:
    input: Volume
    target: Volume
    labels: LabelVolume
    nuclei: tuple[Nucleus, ...] = ()


def place_nuclei(cfg: PhantomConfig, rng: np.random.Generator) -> list[Nucleus]:
    lo, hi = cfg.radius_range
    shape = np.asarray(cfg.shape, dtype=float)
    placed: list[Nucleus] = []
    attempts = 0
    while len(placed) < cfg.n_nuclei:
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS:
            raise PlacementFailed(
                f"placed {len(placed)} of {cfg.n_nuclei} nuclei in {PLACEMENT_ATTEMPTS} attempts"
            )
        axes = rng.uniform(lo, hi, size=3)
        rot = Rotation.random(random_state=rng).as_matrix()
        margin = axes.max() + 2.0
        if np.any(shape - 1 - margin < margin):
            raise PlacementFailed(f"shape {cfg.shape} too small for radius {axes.max():.1f}")
        center = rng.uniform(margin, shape - 1 - margin)
        if all(
            np.linalg.norm(center - other.center) > axes.max() + other.semi_axes.max()
            for other in placed
        ):
            placed.append(Nucleus(center, axes, rot))
    return placed


def rasterize(nuclei, shape) -> tuple[np.ndarray, np.ndarray]:
    """Instance labels and normalized radius rho (inf outside) for ellipsoids."""
    labels = np.zeros(shape, np.uint32)
    rho = np.full(shape, np.inf)
    for i, nuc in enumerate(nuclei, start=1):
        r = int(np.ceil(nuc.semi_axes.max())) + 1
        lo = np.maximum(np.floor(nuc.center).astype(int) - r, 0)
        hi = np.minimum(np.floor(nuc.center).astype(int) + r + 1, shape)
        grid = np.stack(
            np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij"), axis=-1
        )
        local = (grid - nuc.center) @ nuc.rotation  # coordinates along ellipsoid axes
        r2 = np.sum((local / nuc.semi_axes) ** 2, axis=-1)
        inside = r2 <= 1.0
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        labels[sl][inside] = i
        rho[sl] = np.where(inside, np.sqrt(r2), rho[sl])
    return labels, rho


def background_ramp(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Plane ramp along a random direction, spanning [0, amplitude]."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    coords = np.meshgrid(*(np.linspace(-1, 1, n) for n in shape), indexing="ij")
    u = sum(d * c for d, c in zip(direction, coords))
    span = u.max() - u.min()
    if span == 0:
        return np.zeros(shape)
    return amplitude * (u - u.min()) / span


def generate_phantom(cfg: PhantomConfig) -> SynthSample:
    rng = np.random.default_rng(cfg.seed)
    nuclei = place_nuclei(cfg, rng)
    labels, rho = rasterize(nuclei, cfg.shape)
    clean = np.where(labels > 0, cfg.fg_intensity * (1.0 - RADIAL_FALLOFF * rho**2), 0.0)

    sxy = cfg.psf_sigma_xy
    blurred = ndimage.gaussian_filter(
        clean, sigma=(cfg.axial_elongation_sigma_ratio * sxy, sxy, sxy), mode="reflect"
    )
    ramp = background_ramp(cfg.shape, cfg.bg_gradient_amplitude, rng)
    noise = rng.normal(0.0, cfg.bg_noise_sigma, cfg.shape)
    target = np.clip(blurred + ramp + noise, 0.0, None)

    edges = ndimage.gaussian_gradient_magnitude(clean, sigma=1.0)
    peak = edges.max()
    if peak > 0:
        edges = edges / peak
    inp = edges + rng.normal(0.0, cfg.input_noise_sigma, cfg.shape)

    return SynthSample(
        Volume(inp.astype(np.float32)),
        Volume(target.astype(np.float32)),
        LabelVolume(labels),
        tuple(nuclei),
    )
