"""Independent reference implementations used by the tests.

Everything here is written as plainly as possible (explicit loops, textbook
formulas) and shares no code with the package.
"""

import itertools

import numpy as np


def conv_direct(x, w, b, padding):
    """Cross-correlation by nested loops. ``x`` is ``[N, *sp, C]``, ``w`` is
    ``[*k, C, F]``; works for 2 or 3 spatial axes."""
    nsp = w.ndim - 2
    ks = w.shape[:nsp]
    if padding == "same":
        pads = [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in ks]
        x = np.pad(x, [(0, 0)] + pads + [(0, 0)])
    sp = x.shape[1:-1]
    out_sp = [n - k + 1 for n, k in zip(sp, ks)]
    n_b, c_in, c_out = x.shape[0], w.shape[-2], w.shape[-1]
    y = np.zeros((n_b, *out_sp, c_out))
    for n in range(n_b):
        for o in itertools.product(*[range(s) for s in out_sp]):
            for f in range(c_out):
                acc = b[f]
                for k in itertools.product(*[range(s) for s in ks]):
                    pos = tuple(a + c for a, c in zip(o, k))
                    for c in range(c_in):
                        acc += x[(n,) + pos + (c,)] * w[k + (c, f)]
                y[(n,) + o + (f,)] = acc
    return y


def maxpool_direct(x, pool, strides):
    nsp = len(pool)
    sp = x.shape[1:-1]
    out_sp = [(n - p) // s + 1 for n, p, s in zip(sp, pool, strides)]
    y = np.empty((x.shape[0], *out_sp, x.shape[-1]))
    for n in range(x.shape[0]):
        for o in itertools.product(*[range(s) for s in out_sp]):
            for c in range(x.shape[-1]):
                best = -np.inf
                for k in itertools.product(*[range(p) for p in pool]):
                    pos = tuple(oi * si + ki for oi, si, ki in zip(o, strides, k))
                    best = max(best, x[(n,) + pos + (c,)])
                y[(n,) + o + (c,)] = best
    assert nsp in (2, 3)
    return y


def batchnorm_formula(x, gamma, beta, eps):
    """Per-channel batch statistics, written out channel by channel."""
    out = np.empty_like(x)
    for c in range(x.shape[-1]):
        v = x[..., c]
        mean = v.sum() / v.size
        var = ((v - mean) ** 2).sum() / v.size
        out[..., c] = gamma[c] * (v - mean) / np.sqrt(var + eps) + beta[c]
    return out


def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every element of ``x``
    (perturbed in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n)) / scale)


def confusion_loops(true, pred, k):
    m = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        m[t][p] += 1
    return np.array(m)


def trilinear_point(vol, z, y, x):
    """Value of the trilinear interpolant of ``vol`` at fractional voxel coords."""
    z0, y0, x0 = int(np.floor(z)), int(np.floor(y)), int(np.floor(x))
    acc = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                zi = min(z0 + dz, vol.shape[0] - 1)
                yi = min(y0 + dy, vol.shape[1] - 1)
                xi = min(x0 + dx, vol.shape[2] - 1)
                wz = (z - z0) if dz else 1 - (z - z0)
                wy = (y - y0) if dy else 1 - (y - y0)
                wx = (x - x0) if dx else 1 - (x - x0)
                acc += wz * wy * wx * vol[zi, yi, xi]
    return acc


def nifti_fixture(arr, code, byteorder, slope=0.0, inter=0.0, magic=b"n+1\x00", vox_offset=352):
    """Hand-rolled single-file NIfTI-1 writer: header fields packed one by one,
    data written in column-major order with an explicit byte swap."""
    import struct
    np_types = {2: "u1", 4: "i2", 16: "f4"}
    dt = np.dtype(byteorder + np_types[code])
    hdr = bytearray(348)
    struct.pack_into(byteorder + "i", hdr, 0, 348)
    dims = [3] + list(arr.shape) + [1] * (7 - arr.ndim)
    for i, d in enumerate(dims):
        struct.pack_into(byteorder + "h", hdr, 40 + 2 * i, d)
    struct.pack_into(byteorder + "h", hdr, 70, code)
    struct.pack_into(byteorder + "h", hdr, 72, dt.itemsize * 8)
    for i, p in enumerate([1.0, 1.0, 1.0, 1.0]):
        struct.pack_into(byteorder + "f", hdr, 76 + 4 * i, p)
    struct.pack_into(byteorder + "f", hdr, 108, float(vox_offset))
    struct.pack_into(byteorder + "f", hdr, 112, slope)
    struct.pack_into(byteorder + "f", hdr, 116, inter)
    hdr[344:348] = magic
    body = bytearray()
    for k in range(arr.shape[2]):
        for j in range(arr.shape[1]):
            for i in range(arr.shape[0]):
                body += np.array([arr[i, j, k]], dtype=dt).tobytes()
    pad = b"\0" * (vox_offset - 348) if magic == b"n+1\x00" else b""
    return bytes(hdr) + pad + bytes(body)
