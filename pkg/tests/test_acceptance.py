"""End-to-end acceptance checks; each prints one pass/fail line."""

import importlib.util
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_otsu, optimal_matches
from spotlight import nets
from spotlight.config import parse_config
from spotlight.experiment import run_experiment
from spotlight.foreground import otsu_threshold
from spotlight.gradcheck import check_loss_gradient, check_network_gradient
from spotlight.losses import dice_loss, masked_mse, soft_threshold, soft_threshold_grad, spotlight_loss
from spotlight.metrics import NO_CORRELATION, NYQUIST_PX, frc_resolution
from spotlight.segeval import average_precision, greedy_match, iou_table, postprocess, segment_watershed

ROOT = Path(__file__).resolve().parents[1]
RESULTS = ROOT / "results"
SEEDS = (0, 1, 2, 3, 4)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# -- 1: gradient oracle ----------------------------------------------------------------


def _jitter(params, rng):
    for name, v in params.weights.items():
        if name.endswith((".b", ".beta")):
            v[:] = rng.normal(scale=0.1, size=v.shape)
        elif name.endswith(".gamma"):
            v[:] = rng.uniform(0.5, 1.5, size=v.shape)
    return params


def _batch_loss(t, m):
    def loss(pred):
        rs = [spotlight_loss(pred[i], t[i], m[i]) for i in range(len(pred))]
        return sum(r.value for r in rs) / len(rs), np.stack([r.grad for r in rs]) / len(rs)

    return loss


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    loss_err = net_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        t = rng.normal(size=(4, 6, 6))
        m = t > 0.3
        m.flat[0] = True
        p = t + rng.normal(scale=0.5, size=t.shape)
        for fn in (lambda x: masked_mse(x, t, m), lambda x: dice_loss(x, m), lambda x: spotlight_loss(x, t, m)):
            loss_err = max(loss_err, check_loss_gradient(fn, p)[0])

        params = _jitter(nets.init_params(nets.NetConfig(base_channels=2), seed=seed, dtype=np.float64), rng)
        x = rng.normal(size=(2, 4, 6, 6))
        tt = rng.normal(size=x.shape)
        rep = check_network_gradient(params, x, _batch_loss(tt, tt > 0), max_elements=8, seed=seed)
        net_err = max(net_err, max(r[0] for r in rep.values()))
    elapsed = time.perf_counter() - t0
    ok = loss_err < 1e-5 and net_err < 1e-4 and elapsed < 60
    report(1, ok, f"20 instances, loss rel err {loss_err:.2e} (<1e-5), net rel err {net_err:.2e} (<1e-4), {elapsed:.1f}s")


# -- 2: closed forms ------------------------------------------------------------------


def test_criterion_2_closed_forms():
    s = soft_threshold(0.5, -0.95)
    ds = soft_threshold_grad(0.0, -0.95)
    m = np.zeros((2, 4, 4), bool)
    m[0] = True
    d = dice_loss(np.ones(m.shape), m).value

    rng = np.random.default_rng(1)
    t = rng.normal(size=(4, 6, 6))
    mm = np.zeros(t.shape, bool)
    mm[:2] = True
    p = t + np.where(mm, 1.0, 5.0)
    corrupted = np.where(mm, p, rng.normal(scale=1e3, size=p.shape))
    a, b = masked_mse(p, t, mm), masked_mse(corrupted, t, mm)
    exact = a.value == b.value and np.array_equal(a.grad, b.grad)

    ok = abs(s - 0.975) < 1e-12 and abs(ds - 39.0) < 1e-12 and abs(d - 1 / 3) < 1e-7 and exact
    report(2, ok, f"sigma(0.5)={s:.12g}, sigma'(0)={ds:.12g}, dice={d:.9f}, mmse off-mask bit-exact={exact}")


# -- 3: Otsu oracle -------------------------------------------------------------------


def _otsu_volume(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 8, size=3))
    kind = seed % 3
    if kind == 0:
        return rng.normal(size=shape)
    if kind == 1:
        return np.where(rng.random(shape) < 0.3, rng.normal(5, 1, shape), rng.normal(0, 1, shape))
    return rng.exponential(size=shape)


def test_criterion_3_otsu_oracle():
    matches = equivariant = 0
    rng = np.random.default_rng(3)
    for seed in range(100):
        v = _otsu_volume(seed)
        r = otsu_threshold(v)
        want, want_score, scores = brute_force_otsu(v)
        if r.threshold == want or abs(scores[r.cut] - want_score) <= 1e-12 * want_score:
            matches += 1
        a, b = rng.uniform(0.01, 100), rng.uniform(-100, 100)
        r2 = otsu_threshold(a * v + b)
        width = r2.bin_edges[1] - r2.bin_edges[0]
        if abs(r2.threshold - (a * r.threshold + b)) <= width * (1 + 1e-9):
            equivariant += 1
    report(3, matches == 100 and equivariant == 100,
           f"brute force agreement {matches}/100, affine within one bin {equivariant}/100")


# -- 4: AP oracle ---------------------------------------------------------------------


def _random_labels(rng, shape=(8, 12, 12), max_objects=4):
    lab = np.zeros(shape, np.int64)
    for i in range(1, rng.integers(0, max_objects + 1) + 1):
        lo = [rng.integers(0, d - 2) for d in shape]
        size = rng.integers(2, 7, size=3)
        lab[tuple(slice(a, min(a + s, d)) for a, s, d in zip(lo, size, shape))] = i
    return lab


def test_criterion_4_ap_oracle():
    agree = 0
    for trial in range(200):
        rng = np.random.default_rng(4000 + trial)
        iou = iou_table(_random_labels(rng), _random_labels(rng))
        agree += all(greedy_match(iou, tau) == optimal_matches(iou, tau) for tau in (0.25, 0.5, 0.75))
    a = np.zeros((10, 10, 20), int)
    b = np.zeros_like(a)
    a[1:9, 1:9, 2:10] = 1
    b[1:9, 1:9, 6:14] = 1
    cube = average_precision(a, b, (0.25, 0.5))
    report(4, agree == 200 and cube == [1.0, 0.0],
           f"greedy == exhaustive {agree}/200 (taus 0.25/0.5/0.75), cube offset AP(0.25,0.5)={cube}")


# -- 5: segmentation sanity -----------------------------------------------------------


def _ball(shape, center, radius):
    grid = np.indices(shape, dtype=np.float64)
    return sum((g - c) ** 2 for g, c in zip(grid, center)) <= radius**2


def test_criterion_5_two_spheres():
    shape = (32, 64, 96)
    a = _ball(shape, (16, 32, 28), 8)
    b = _ball(shape, (16, 32, 68), 8)
    v = (a | b).astype(np.float64) + np.random.default_rng(0).normal(scale=0.02, size=shape)
    t0 = time.perf_counter()
    labels = postprocess(segment_watershed(v)).labels
    elapsed = time.perf_counter() - t0
    ious = []
    for sphere in (a, b):
        inst = labels == np.bincount(labels[sphere]).argmax()
        ious.append((inst & sphere).sum() / (inst | sphere).sum())
    n = int(labels.max())
    ok = n == 2 and min(ious) >= 0.8 and elapsed < 30
    report(5, ok, f"{n} instances, IoU {ious[0]:.3f}/{ious[1]:.3f} (>=0.8), {elapsed:.1f}s")


# -- 6: FRC ---------------------------------------------------------------------------


def test_criterion_6_frc():
    rng = np.random.default_rng(6)
    v = ndimage.gaussian_filter(rng.normal(size=(4, 48, 48)), 1.0) + rng.normal(size=(4, 48, 48))
    same = frc_resolution(v, v)
    x, y = rng.normal(size=(2, 8, 64, 64))
    noise = frc_resolution(x, y)
    base = rng.normal(size=(4, 64, 64))
    sharp = base + 0.1 * rng.normal(size=base.shape)
    blurred = ndimage.gaussian_filter(base, (0, 2, 2)) + 0.1 * rng.normal(size=base.shape)
    blur = frc_resolution(blurred, sharp)
    ok = same == NYQUIST_PX and noise == NO_CORRELATION and NYQUIST_PX < blur < NO_CORRELATION
    report(6, ok, f"identical {same} px, independent noise {noise}, sigma=2 blur {blur:.2f} px (>2)")


# -- 7-9: multi-seed end-to-end --------------------------------------------------------


def _seed_summaries() -> dict:
    spec = importlib.util.spec_from_file_location("run_experiments", ROOT / "scripts" / "run_experiments.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod.run_seeds(SEEDS, RESULTS)


@pytest.fixture(scope="module")
def seeds():
    return _seed_summaries()


@pytest.mark.slow
def test_criterion_7_spotlight_beats_mse(seeds):
    wins = [s["spotlight.ap@0.5"] > s["mse.ap@0.5"] for s in seeds.values()]
    runtime = sum(s["runtime_s"] for s in seeds.values())
    pairs = ", ".join(f"{s['spotlight.ap@0.5']:.3f}/{s['mse.ap@0.5']:.3f}" for s in seeds.values())
    report(7, sum(wins) >= 4,
           f"Spotlight > MSE AP(0.5) in {sum(wins)}/5 seeds (spotlight/mse: {pairs}); runtime {runtime / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_sweep_flatness(seeds):
    flat = [s["spotlight.sweep.ap@0.5.std"] < s["mse.sweep.ap@0.5.std"] for s in seeds.values()]
    near = [abs(s["mse.sweep.ap@0.5.best"] - s["spotlight.sweep.ap@0.5.unthresholded"]) <= 0.15
            for s in seeds.values()]
    ok = sum(flat) >= 4 and all(near)
    report(8, ok, f"Spotlight sweep std < MSE in {sum(flat)}/5 seeds; MSE best within 0.15 of Spotlight "
                  f"unthresholded in {sum(near)}/5 seeds")


@pytest.mark.slow
def test_criterion_9_psnr_split(seeds):
    good = []
    for s in seeds.values():
        d_fg = s["spotlight.psnr.fg"] - s["mse.psnr.fg"]
        d_whole = s["spotlight.psnr.whole"] - s["mse.psnr.whole"]
        good.append(abs(d_fg) < abs(d_whole) and d_whole < 0)
    report(9, sum(good) >= 4, f"|dPSNR fg| < |dPSNR whole| with Spotlight lower on whole in {sum(good)}/5 seeds")


# -- 10: determinism ------------------------------------------------------------------

SMALL = """
seed=3
data.n_train=2
data.n_test=1
phantom.shape=24,48,48
phantom.n_nuclei=3
phantom.radius_range=4,5
net.base_channels=2
train.iterations=5
train.batch_size=2
train.patch_shape=8,16,16
seg.min_size=20
"""


def test_criterion_10_determinism(tmp_path):
    cfg = parse_config(SMALL)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    report(10, len(names) > 0 and same == names, f"{len(same)}/{len(names)} CSVs byte-identical across two runs")
