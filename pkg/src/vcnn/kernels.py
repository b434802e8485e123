"""Hot inner loops: stride-1 valid convolution and max-pooling on 5-D blocks.

All kernels work on channels-last batches ``[N, D, H, W, C]``; 2-D layers
call them with ``D == 1``. Each kernel exists twice:

* ``*_nb``: compiled by numba. Convolution gathers one im2col slab per
  (sample, output depth) and hands it to BLAS; the input gradient is a full
  correlation with the flipped kernel. Pooling is plain loops.
* ``*_np``: vectorised numpy. im2col over the in-plane window with one GEMM
  per kernel depth offset; the input gradient is a col2im scatter.

The public names (``conv_forward`` etc.) are bound to one of the two at
import time, see :mod:`vcnn._accel`. Every parallel loop writes disjoint
output elements and reduces in a fixed order, so results do not depend on
the thread count.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit

if HAS_NUMBA:
    from numba import prange
else:
    prange = range


# ---------------------------------------------------------------- convolution


@njit
def _slab_cols(x, n, z, kd, kh, kw, Ho, Wo):
    Cin = x.shape[4]
    cols = np.empty((Ho * Wo, kd * kh * kw * Cin), dtype=x.dtype)
    for y in range(Ho):
        for xx in range(Wo):
            r = y * Wo + xx
            k = 0
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        for ci in range(Cin):
                            cols[r, k] = x[n, z + a, y + b, xx + c, ci]
                            k += 1
    return cols


@njit(parallel=True)
def conv_forward_nb(x, w):
    N, D, H, W, Cin = x.shape
    kd, kh, kw, _, Cout = w.shape
    Do, Ho, Wo = D - kd + 1, H - kh + 1, W - kw + 1
    w2 = np.ascontiguousarray(w).reshape(kd * kh * kw * Cin, Cout)
    out = np.empty((N, Do, Ho * Wo, Cout), dtype=x.dtype)
    for idx in prange(N * Do):
        n = idx // Do
        z = idx % Do
        out[n, z] = np.dot(_slab_cols(x, n, z, kd, kh, kw, Ho, Wo), w2)
    return out.reshape(N, Do, Ho, Wo, Cout)


@njit
def conv_grad_weight_nb(x, g, kshape):
    kd, kh, kw = kshape
    N, Do, Ho, Wo, Cout = g.shape
    Cin = x.shape[4]
    gw = np.zeros((kd * kh * kw * Cin, Cout), dtype=x.dtype)
    # serial over slabs: the reduction order is fixed
    for n in range(N):
        for z in range(Do):
            g2 = np.ascontiguousarray(g[n, z]).reshape(Ho * Wo, Cout)
            gw += np.dot(_slab_cols(x, n, z, kd, kh, kw, Ho, Wo).T, g2)
    return gw.reshape(kd, kh, kw, Cin, Cout)


@njit
def conv_grad_input_nb(g, w, in_shape):
    # full correlation of the zero-padded gradient with the flipped,
    # channel-transposed kernel
    kd, kh, kw, Cin, Cout = w.shape
    N, Do, Ho, Wo, _ = g.shape
    gp = np.zeros((N, Do + 2 * (kd - 1), Ho + 2 * (kh - 1), Wo + 2 * (kw - 1), Cout), dtype=g.dtype)
    gp[:, kd - 1:kd - 1 + Do, kh - 1:kh - 1 + Ho, kw - 1:kw - 1 + Wo, :] = g
    wf = np.empty((kd, kh, kw, Cout, Cin), dtype=w.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                wf[a, b, c] = w[kd - 1 - a, kh - 1 - b, kw - 1 - c].T
    return conv_forward_nb(gp, wf)


def _plane_cols(xa, kh, kw, Ho, Wo):
    # [N, Do, H, W, Cin] -> [N*Do*Ho*Wo, kh*kw*Cin], column order (kh, kw, Cin)
    win = np.lib.stride_tricks.sliding_window_view(xa, (kh, kw), axis=(2, 3))
    win = win[:, :, :Ho, :Wo]
    return win.transpose(0, 1, 2, 3, 5, 6, 4).reshape(-1, kh * kw * xa.shape[4])


def conv_forward_np(x, w):
    N, D, H, W, Cin = x.shape
    kd, kh, kw, _, Cout = w.shape
    Do, Ho, Wo = D - kd + 1, H - kh + 1, W - kw + 1
    out = np.zeros((N * Do * Ho * Wo, Cout), dtype=x.dtype)
    for a in range(kd):
        cols = _plane_cols(x[:, a:a + Do], kh, kw, Ho, Wo)
        out += cols @ w[a].reshape(-1, Cout)
    return out.reshape(N, Do, Ho, Wo, Cout)


def conv_grad_weight_np(x, g, kshape):
    kd, kh, kw = kshape
    N, Do, Ho, Wo, Cout = g.shape
    Cin = x.shape[4]
    g2 = g.reshape(-1, Cout)
    gw = np.empty((kd, kh, kw, Cin, Cout), dtype=x.dtype)
    for a in range(kd):
        cols = _plane_cols(x[:, a:a + Do], kh, kw, Ho, Wo)
        gw[a] = (cols.T @ g2).reshape(kh, kw, Cin, Cout)
    return gw


def conv_grad_input_np(g, w, in_shape):
    N, D, H, W, Cin = in_shape
    kd, kh, kw, _, Cout = w.shape
    Do, Ho, Wo = g.shape[1], g.shape[2], g.shape[3]
    g2 = g.reshape(-1, Cout)
    gx = np.zeros(in_shape, dtype=g.dtype)
    for a in range(kd):
        dcols = (g2 @ w[a].reshape(-1, Cout).T).reshape(N, Do, Ho, Wo, kh, kw, Cin)
        for b in range(kh):
            for c in range(kw):
                gx[:, a:a + Do, b:b + Ho, c:c + Wo] += dcols[:, :, :, :, b, c]
    return gx


# ---------------------------------------------------------------- max-pooling


@njit(parallel=True)
def maxpool_forward_nb(x, pool, stride):
    N, D, H, W, C = x.shape
    pd, ph, pw = pool
    sd, sh, sw = stride
    Do = (D - pd) // sd + 1
    Ho = (H - ph) // sh + 1
    Wo = (W - pw) // sw + 1
    out = np.empty((N, Do, Ho, Wo, C), dtype=x.dtype)
    arg = np.empty((N, Do, Ho, Wo, C), dtype=np.int64)
    for idx in prange(N * Do):
        n = idx // Do
        z = idx % Do
        for y in range(Ho):
            for xx in range(Wo):
                for ch in range(C):
                    best = x[n, z * sd, y * sh, xx * sw, ch]
                    k_best = 0
                    k = 0
                    for a in range(pd):
                        for b in range(ph):
                            for c in range(pw):
                                v = x[n, z * sd + a, y * sh + b, xx * sw + c, ch]
                                if v > best:
                                    best = v
                                    k_best = k
                                k += 1
                    out[n, z, y, xx, ch] = best
                    arg[n, z, y, xx, ch] = k_best
    return out, arg


@njit(parallel=True)
def maxpool_backward_nb(g, arg, in_shape, pool, stride):
    N, Do, Ho, Wo, C = g.shape
    pd, ph, pw = pool
    sd, sh, sw = stride
    gx = np.zeros(in_shape, dtype=g.dtype)
    # windows may overlap along any axis, so only the batch axis is parallel
    for n in prange(N):
        for z in range(Do):
            for y in range(Ho):
                for xx in range(Wo):
                    for ch in range(C):
                        k = arg[n, z, y, xx, ch]
                        a = k // (ph * pw)
                        b = (k // pw) % ph
                        c = k % pw
                        gx[n, z * sd + a, y * sh + b, xx * sw + c, ch] += g[n, z, y, xx, ch]
    return gx


def _window_slices(a, b, c, out_sp, stride):
    Do, Ho, Wo = out_sp
    sd, sh, sw = stride
    return (
        slice(None),
        slice(a, a + sd * (Do - 1) + 1, sd),
        slice(b, b + sh * (Ho - 1) + 1, sh),
        slice(c, c + sw * (Wo - 1) + 1, sw),
    )


def maxpool_forward_np(x, pool, stride):
    N, D, H, W, C = x.shape
    pd, ph, pw = pool
    out_sp = tuple((n - p) // s + 1 for n, p, s in zip((D, H, W), pool, stride))
    out = None
    arg = np.zeros((N,) + out_sp + (C,), dtype=np.int64)
    k = 0
    for a in range(pd):
        for b in range(ph):
            for c in range(pw):
                v = x[_window_slices(a, b, c, out_sp, stride)]
                if out is None:
                    out = v.copy()
                else:
                    better = v > out
                    out[better] = v[better]
                    arg[better] = k
                k += 1
    return out, arg


def maxpool_backward_np(g, arg, in_shape, pool, stride):
    pd, ph, pw = pool
    out_sp = g.shape[1:4]
    gx = np.zeros(in_shape, dtype=g.dtype)
    k = 0
    for a in range(pd):
        for b in range(ph):
            for c in range(pw):
                gx[_window_slices(a, b, c, out_sp, stride)] += np.where(arg == k, g, 0)
                k += 1
    return gx


if HAS_NUMBA:
    conv_forward = conv_forward_nb
    conv_grad_weight = conv_grad_weight_nb
    conv_grad_input = conv_grad_input_nb
    maxpool_forward = maxpool_forward_nb
    maxpool_backward = maxpool_backward_nb
else:
    conv_forward = conv_forward_np
    conv_grad_weight = conv_grad_weight_np
    conv_grad_input = conv_grad_input_np
    maxpool_forward = maxpool_forward_np
    maxpool_backward = maxpool_backward_np
