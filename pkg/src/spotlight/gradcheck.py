"""Finite-difference oracles for the analytic gradients.

Uses the fourth-order central stencil
``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`` so that truncation
error stays far below the checked tolerances even where the soft threshold is
steep (slope 39 at the origin for k = -0.95).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from spotlight import nets

STENCIL = ((2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0))


def fd_gradient(
    f: Callable[[], float],
    x: np.ndarray,
    h: float = 1e-4,
    valid: Optional[Callable[[], bool]] = None,
    indices=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Numerical gradient of ``f()`` w.r.t. elements of ``x`` (perturbed in place).

    Only ``indices`` are visited when given (others stay 0). ``valid`` is
    evaluated at every stencil point; elements where it returns False (e.g. a
    ReLU flipped) are reported in the returned skip mask.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    skipped = np.zeros(x.shape, dtype=bool)
    for idx in np.ndindex(x.shape) if indices is None else indices:
        old = x[idx]
        total = 0.0
        for step, weight in STENCIL:
            x[idx] = old + step * h
            total += weight * f()
            if valid is not None and not valid():
                skipped[idx] = True
        x[idx] = old
        grad[idx] = total / (12.0 * h)
    return grad, skipped


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps exact zeros (masked-out voxels) from turning stencil
    round-off, around 1e-13, into a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def tensor_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over a whole tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_loss_gradient(loss_fn, pred: np.ndarray, h: float = 1e-4, kink_margin: float = None):
    """Compare ``loss_fn(pred).grad`` to finite differences.

    Voxels whose stencil straddles pred == 0 (the rectification kink) are
    excluded. Returns (max relative error, number of voxels checked).
    """
    pred = np.array(pred, dtype=np.float64)
    analytic = loss_fn(pred).grad
    numeric, _ = fd_gradient(lambda: loss_fn(pred).value, pred, h)
    margin = 2.0 * h if kink_margin is None else kink_margin
    keep = np.abs(pred) > margin
    err = relative_error(analytic, numeric)[keep]
    return float(err.max(initial=0.0)), int(keep.sum())


def check_network_gradient(
    params: nets.NetParams, x, loss_and_grad, h: float = 1e-4, max_elements: int = None, seed: int = 0
):
    """Finite-difference check of the parameter tensors of a float64 network.

    ``loss_and_grad(pred) -> (value, grad)``. Elements whose perturbation flips
    any ReLU, or moves a prediction across 0 (the rectification kink), are
    skipped. With ``max_elements`` only a seeded random subset of each tensor
    is visited. Returns {name: (relative error, n_checked, n_skipped)}.
    """
    pred, cache = nets.forward(params, x)
    _, g = loss_and_grad(pred)
    analytic = nets.backward(cache, g)
    base = [p.copy() for p in cache.relu_patterns()] + [pred > 0]
    state = {}

    def f():
        out, c = nets.forward(params, x)
        state["patterns"] = c.relu_patterns() + [out > 0]
        return loss_and_grad(out)[0]

    def same_pattern():
        return all(np.array_equal(a, b) for a, b in zip(base, state["patterns"]))

    rng = np.random.default_rng(seed)
    report = {}
    for name, w in params.weights.items():
        indices = list(np.ndindex(w.shape))
        if max_elements is not None and len(indices) > max_elements:
            pick = rng.choice(len(indices), size=max_elements, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        visited = np.zeros(w.shape, dtype=bool)
        for idx in indices:
            visited[idx] = True
        numeric, skipped = fd_gradient(f, w, h, same_pattern, indices)
        keep = visited & ~skipped
        report[name] = (
            tensor_relative_error(analytic[name][keep], numeric[keep]),
            int(keep.sum()),
            int(skipped.sum()),
        )
    return report
