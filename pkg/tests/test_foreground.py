import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_otsu
from spotlight.errors import ConstantImage
from spotlight.foreground import (
    MIN_FG_FRACTION,
    fg_fraction,
    foreground_mask,
    otsu_threshold,
    standardize,
    standardize_mean,
)
from spotlight.volume import MaskVolume, Volume


def test_two_level_volume_splits_evenly():
    v = np.zeros((4, 4, 4))
    v[2:] = 10.0
    r = otsu_threshold(v)
    assert 0 < r.threshold <= 10
    m = foreground_mask(v, r.threshold).bits
    assert m.sum() == 32 and m[2:].all()


def test_trimodal_matches_brute_force():
    rng = np.random.default_rng(0)
    v = rng.choice([0.0, 5.0, 10.0], p=[0.6, 0.2, 0.2], size=(6, 8, 8))
    want, _, _ = brute_force_otsu(v)
    assert otsu_threshold(v).threshold == want


def test_constant_volume():
    with pytest.raises(ConstantImage):
        otsu_threshold(np.full((3, 3, 3), 2.0))


def _vol(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 8, size=3))
    kind = seed % 3
    if kind == 0:
        return rng.normal(size=shape)
    if kind == 1:
        return np.where(rng.random(shape) < 0.3, rng.normal(5, 1, shape), rng.normal(0, 1, shape))
    return rng.exponential(size=shape)


@pytest.mark.parametrize("seed", range(100))
def test_otsu_equals_brute_force(seed):
    v = _vol(seed)
    r = otsu_threshold(v)
    want, want_score, scores = brute_force_otsu(v)
    # identical cut, or a numerically tied one
    assert r.threshold == want or scores[r.cut] == pytest.approx(want_score, rel=1e-12)
    assert r.inter_class_variance[r.cut] == pytest.approx(want_score, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(0.01, 100.0),
    st.floats(-100.0, 100.0),
)
def test_affine_equivariance(seed, a, b):
    v = _vol(seed)
    r = otsu_threshold(v)
    r2 = otsu_threshold(a * v + b)
    width = r2.bin_edges[1] - r2.bin_edges[0]
    assert abs(r2.threshold - (a * r.threshold + b)) <= width * (1 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
def test_threshold_within_range_and_both_classes_non_empty(v):
    if v.min() == v.max():
        return
    r = otsu_threshold(v)
    m = v >= r.threshold
    assert v.min() <= r.threshold <= v.max()
    assert m.any() and (~m).any()


def test_mask_boundaries():
    v = np.arange(4.0).reshape(1, 1, 4)
    assert foreground_mask(v, 0.0).bits.all()
    assert not foreground_mask(v, 3.5).bits.any()
    assert foreground_mask(v, 2.0).bits.ravel().tolist() == [False, False, True, True]


def test_fg_fraction():
    assert fg_fraction(MaskVolume(np.zeros((2, 2, 2)))) == 0.0
    assert fg_fraction(MaskVolume(np.ones((2, 2, 2)))) == 1.0
    m = np.zeros((32, 64, 64), bool)
    m[0, 0, 0] = True
    assert fg_fraction(m) == 1 / 131072
    assert fg_fraction(m) < MIN_FG_FRACTION


def test_standardize():
    v = Volume(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 4))
    t = 3.0
    out, sigma = standardize(v, t)
    assert sigma == pytest.approx(np.sqrt(5.0))
    assert out.data[0, 0, 1] == 0.0
    data = np.array([0.0, 4.0] * 4).reshape(2, 2, 2)  # population std 2
    out, sigma = standardize(data, 1.0)
    assert sigma == 2.0
    assert out.data.max() == pytest.approx(1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_standardize_preserves_mask(seed):
    v = _vol(seed)
    t = otsu_threshold(v).threshold
    out, _ = standardize(v, t)
    assert np.array_equal(foreground_mask(out, 0.0).bits, foreground_mask(v, t).bits)


def test_standardize_mean():
    v = np.random.default_rng(0).normal(3, 2, size=(4, 5, 6))
    out, mean, sigma = standardize_mean(v)
    assert abs(out.data.mean()) < 1e-12 and out.data.std() == pytest.approx(1.0)
    assert mean == pytest.approx(v.mean())
    with pytest.raises(ConstantImage):
        standardize_mean(np.ones((2, 2, 2)))
