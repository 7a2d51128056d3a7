"""3D convolution kernels on channels-last arrays (N, Z, Y, X, C).

Weights are stored as (kz, ky, kx, C_in, C_out). The 3x3x3 same-padding
convolution dispatches to torch's CPU kernels through zero-copy views when
torch is importable; ``conv3_forward_ref``/``conv3_backward_ref`` are the
plain numpy versions used as the cross-check and fallback. The stride-2
down/up convolutions are non-overlapping, so they reduce to one GEMM each.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import torch

    _HAVE_TORCH = True
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None
    _HAVE_TORCH = False


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def conv3_forward_ref(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cols = sliding_window_view(_pad1(x), (3, 3, 3), axis=(1, 2, 3))  # N,Z,Y,X,C,3,3,3
    return np.tensordot(cols, w, axes=([5, 6, 7, 4], [0, 1, 2, 3]))


def conv3_backward_ref(x, w, g, need_dx=True):
    cols = sliding_window_view(_pad1(x), (3, 3, 3), axis=(1, 2, 3))
    dw = np.tensordot(cols, g, axes=([0, 1, 2, 3], [0, 1, 2, 3]))  # C,3,3,3,Co
    dw = dw.transpose(1, 2, 3, 0, 4)
    dx = None
    if need_dx:
        w_flip = w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
        dx = conv3_forward_ref(g, np.ascontiguousarray(w_flip))
    return dx, dw


def _to_torch(x: np.ndarray):
    # (N,Z,Y,X,C) C-contiguous -> NCDHW view with channels_last_3d strides
    return torch.from_numpy(np.ascontiguousarray(x)).permute(0, 4, 1, 2, 3)


def _from_torch(t) -> np.ndarray:
    return np.ascontiguousarray(t.permute(0, 2, 3, 4, 1).numpy())


def _torch_weight(w: np.ndarray):
    return torch.from_numpy(np.ascontiguousarray(w.transpose(4, 3, 0, 1, 2)))


def conv3_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if not _HAVE_TORCH:
        return conv3_forward_ref(x, w)
    with torch.no_grad():
        out = torch.nn.functional.conv3d(_to_torch(x), _torch_weight(w), padding=1)
    return _from_torch(out)


def conv3_backward(x, w, g, need_dx=True):
    """Gradients of sum(g * conv3(x, w)) w.r.t. x (optional) and w."""
    if not _HAVE_TORCH:
        return conv3_backward_ref(x, w, g, need_dx)
    with torch.no_grad():
        tx, tw, tg = _to_torch(x), _torch_weight(w), _to_torch(g)
        dx, dw, _ = torch.ops.aten.convolution_backward(
            tg, tx, tw, None, [1, 1, 1], [1, 1, 1], [1, 1, 1], False, [0, 0, 0], 1,
            [need_dx, True, False],
        )
    dw = np.ascontiguousarray(dw.numpy().transpose(2, 3, 4, 1, 0))
    return (_from_torch(dx) if need_dx else None), dw


def _blocks(x: np.ndarray) -> np.ndarray:
    n, z, y, xx, c = x.shape
    b = x.reshape(n, z // 2, 2, y // 2, 2, xx // 2, 2, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return b.reshape(n * (z // 2) * (y // 2) * (xx // 2), 8 * c)


def _unblocks(b: np.ndarray, shape) -> np.ndarray:
    n, z, y, xx, c = shape
    b = b.reshape(n, z // 2, y // 2, xx // 2, 2, 2, 2, c).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return b.reshape(shape)


def down_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2x2x2 convolution with stride 2 (halves every spatial dimension)."""
    n, z, y, xx, _ = x.shape
    out = _blocks(x) @ w.reshape(-1, w.shape[-1])
    return out.reshape(n, z // 2, y // 2, xx // 2, w.shape[-1])


def down_backward(x, w, g, need_dx=True):
    gm = g.reshape(-1, g.shape[-1])
    dw = (_blocks(x).T @ gm).reshape(w.shape)
    dx = _unblocks(gm @ w.reshape(-1, w.shape[-1]).T, x.shape) if need_dx else None
    return dx, dw


def up_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2x2x2 transposed convolution with stride 2 (doubles every spatial dimension)."""
    n, z, y, xx, ci = x.shape
    co = w.shape[-1]
    wm = w.transpose(3, 0, 1, 2, 4).reshape(ci, 8 * co)
    out = x.reshape(-1, ci) @ wm
    return _unblocks(out.reshape(-1, 8 * co), (n, 2 * z, 2 * y, 2 * xx, co))


def up_backward(x, w, g, need_dx=True):
    ci, co = w.shape[3], w.shape[4]
    gm = _blocks(g)  # (P, 8*co) in (a,b,c,co) order
    xm = x.reshape(-1, ci)
    dw = (xm.T @ gm).reshape(ci, 2, 2, 2, co).transpose(1, 2, 3, 0, 4)
    dx = None
    if need_dx:
        wm = w.transpose(3, 0, 1, 2, 4).reshape(ci, 8 * co)
        dx = (gm @ wm.T).reshape(x.shape)
    return dx, np.ascontiguousarray(dw)
