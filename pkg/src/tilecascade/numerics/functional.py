"""Dense tensor ops with hand-written backward passes.

Every op comes as a (forward, backward) pair over float64 arrays. Forward
returns the output (plus whatever intermediate the backward needs); backward
takes the upstream gradient and returns input/parameter gradients. Nothing
here knows about parameter names; the layers module binds these to a store.

conv2d is the hot path: forward is im2col + one GEMM, backward recomputes the
column matrix from the cached input (memory over speed) and scatters the
column gradient back with k*k slice adds.
"""

import numpy as np

from ..errors import ShapeError


def _same_padding(kh: int, kw: int) -> tuple[int, int]:
    return (kh - 1) // 2, (kw - 1) // 2


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, Hout*Wout) for stride-1 windows."""
    n, c, hp, wp = xp.shape
    hout, wout = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (N, C, Hout, Wout, kh, kw) -> (N, C, kh, kw, Hout, Wout)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, hout * wout)


def _norm_padding(padding, kh, kw):
    if padding is None:
        return _same_padding(kh, kw)
    if isinstance(padding, int):
        return padding, padding
    return padding


def _pad_zeros(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the two trailing axes. Faster than np.pad on small arrays."""
    if not (ph or pw):
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
           padding=None) -> np.ndarray:
    """2-D cross-correlation, stride 1.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    padding is an int (both axes) or pair; defaults to "same" for odd kernels.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D input/kernel, got {x.shape} / {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    ph, pw = _norm_padding(padding, kh, kw)
    if h + 2 * ph < kh or wid + 2 * pw < kw:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {w.shape}")
    if kh == 1 and kw == 1 and not (ph or pw):
        # pointwise conv is a plain channel mix; skip the im2col machinery
        y = np.matmul(w.reshape(cout, cin)[None], x.reshape(n, cin, h * wid))
        y = y.reshape(n, cout, h, wid)
        if b is not None:
            y += b[None, :, None, None]
        return y
    xp = _pad_zeros(x, ph, pw)
    hout, wout = h + 2 * ph - kh + 1, wid + 2 * pw - kw + 1
    cols = _im2col(xp, kh, kw)
    y = np.matmul(w.reshape(cout, -1)[None], cols).reshape(n, cout, hout, wout)
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                    padding=None, need_dx: bool = True):
    """Gradients of conv2d. Returns (dx, dw, db); dx is None if not needed."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = _norm_padding(padding, kh, kw)
    hout, wout = dy.shape[2], dy.shape[3]
    dy_mat = dy.reshape(n, cout, hout * wout)       # (N, Cout, L)
    if kh == 1 and kw == 1 and not (ph or pw):
        cols = x.reshape(n, cin, h * wid)
        dw = np.einsum("ncl,nkl->ck", dy_mat, cols).reshape(w.shape)
        db = dy.sum(axis=(0, 2, 3))
        if not need_dx:
            return None, dw, db
        dx = np.matmul(w.reshape(cout, cin).T[None], dy_mat).reshape(x.shape)
        return dx, dw, db
    xp = _pad_zeros(x, ph, pw)
    cols = _im2col(xp, kh, kw)                      # (N, Cin*kh*kw, L)

    dw = np.einsum("ncl,nkl->ck", dy_mat, cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db

    dcols = np.matmul(w.reshape(cout, -1).T[None], dy_mat)   # (N, Cin*kh*kw, L)
    dcols = dcols.reshape(n, cin, kh, kw, hout, wout)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hout, j:j + wout] += dcols[:, :, i, j]
    dx = dxp[:, :, ph:ph + h, pw:pw + wid] if (ph or pw) else dxp
    return dx, dw, db


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflowing to inf for very negative x still yields the right
    # limit (1/inf == 0), so one vectorized expression covers both tails
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               groups: int, eps: float = 1e-5):
    """Returns (y, xhat, inv_std). x: (N, C, H, W); gamma/beta: (C,)."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    dev = xg - mean
    var = np.mean(dev * dev, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (dev * inv_std).reshape(x.shape)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, inv_std.reshape(n, groups)


def group_norm_backward(dy: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                        gamma: np.ndarray, groups: int):
    """Returns (dx, dgamma, dbeta)."""
    n, c, h, w = dy.shape
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dbeta = np.sum(dy, axis=(0, 2, 3))
    dxhat = (dy * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    m = dxhat.shape[2]
    mean_d = dxhat.mean(axis=2, keepdims=True)
    mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
    dx = (dxhat - mean_d - xh * mean_dx) * inv_std[:, :, None]
    return dx.reshape(dy.shape), dgamma, dbeta


def avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 wants even spatial dims, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (N, Fin); w: (Fout, Fin); b: (Fout,)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} vs kernel {w.shape}")
    return x @ w.T + b[None, :]


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db
