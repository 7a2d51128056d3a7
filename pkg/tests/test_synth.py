import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from spotlight.errors import PlacementFailed
from spotlight.synth import PhantomConfig, background_ramp, generate_phantom, place_nuclei, rasterize

SMALL = dict(shape=(32, 64, 64), radius_range=(4.0, 7.0))


def test_empty_phantom_is_background_only():
    s = generate_phantom(PhantomConfig(n_nuclei=0, seed=3, **SMALL))
    assert s.labels.n_instances == 0
    rng = np.random.default_rng(3)
    ramp = background_ramp(SMALL["shape"], 0.1, rng)
    noise = rng.normal(0.0, 0.05, SMALL["shape"])
    want = np.clip(ramp + noise, 0.0, None).astype(np.float32)
    assert np.array_equal(s.target.data, want)


def test_same_seed_bit_identical():
    a = generate_phantom(PhantomConfig(seed=7, **SMALL))
    b = generate_phantom(PhantomConfig(seed=7, **SMALL))
    assert np.array_equal(a.input.data, b.input.data)
    assert np.array_equal(a.target.data, b.target.data)
    assert np.array_equal(a.labels.labels, b.labels.labels)
    c = generate_phantom(PhantomConfig(seed=8, **SMALL))
    assert not np.array_equal(a.target.data, c.target.data)


def test_instance_volumes_match_ellipsoids():
    s = generate_phantom(PhantomConfig(n_nuclei=5, seed=1))
    assert s.labels.n_instances == 5
    counts = np.bincount(s.labels.labels.ravel())[1:]
    for nuc, count in zip(s.nuclei, counts):
        assert 0.5 * nuc.volume <= count <= 1.5 * nuc.volume
        assert count == pytest.approx(nuc.volume, rel=0.1)


def _extent(mask, axis):
    idx = np.nonzero(mask.any(axis=tuple(a for a in range(3) if a != axis)))[0]
    return idx.max() - idx.min() + 1


def test_axial_elongation():
    cfg = PhantomConfig(n_nuclei=4, seed=2, bg_noise_sigma=0.0, bg_gradient_amplitude=0.0)
    s = generate_phantom(cfg)
    target = s.target.data
    lab = s.labels.labels
    blobs, _ = ndimage.label(target > 0.15)
    for i in range(1, lab.max() + 1):
        inst = lab == i
        blob = blobs == np.bincount(blobs[inst]).argmax()
        dz = _extent(blob, 0) - _extent(inst, 0)
        dy = _extent(blob, 1) - _extent(inst, 1)
        dx = _extent(blob, 2) - _extent(inst, 2)
        assert dz > 0
        assert dz > max(dy, dx)


def test_nuclei_do_not_overlap_and_stay_inside():
    cfg = PhantomConfig(seed=4)
    nuclei = place_nuclei(cfg, np.random.default_rng(4))
    for i, a in enumerate(nuclei):
        assert np.all(a.center - a.semi_axes.max() > 0)
        assert np.all(a.center + a.semi_axes.max() < np.array(cfg.shape) - 1)
        for b in nuclei[i + 1 :]:
            assert np.linalg.norm(a.center - b.center) > a.semi_axes.max() + b.semi_axes.max()


def test_placement_failure():
    with pytest.raises(PlacementFailed):
        generate_phantom(PhantomConfig(shape=(16, 32, 32), n_nuclei=50, radius_range=(6, 7)))


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(radius_range=(8, 4))
    with pytest.raises(ValueError):
        PhantomConfig(n_nuclei=-1)


def test_rasterize_rotated_sphere_is_rotation_invariant():
    from spotlight.synth import Nucleus

    c = np.array([10.0, 10.0, 10.0])
    ax = np.array([5.3, 5.3, 5.3])  # no lattice point on the surface
    a, _ = rasterize([Nucleus(c, ax, np.eye(3))], (21, 21, 21))
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))
    b, _ = rasterize([Nucleus(c, ax, q)], (21, 21, 21))
    assert np.array_equal(a, b)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_phantom_properties(seed):
    s = generate_phantom(PhantomConfig(n_nuclei=3, seed=seed, **SMALL))
    assert s.target.data.min() >= 0.0
    assert s.input.shape == s.target.shape == s.labels.shape
    assert s.labels.n_instances == 3
    assert s.target.data[s.labels.labels > 0].mean() > s.target.data[s.labels.labels == 0].mean()


def test_ramp_span():
    r = background_ramp((4, 8, 8), 0.1, np.random.default_rng(0))
    assert r.min() == 0.0 and r.max() == pytest.approx(0.1)
