"""Forward and backward passes for every layer kind the two networks use.

Activations are channels-last batches: ``[N, H, W, C]`` for 2-D layers and
``[N, D, H, W, C]`` for 3-D layers. Each ``*_forward`` returns
``(output, LayerCache)``; :func:`layer_backward` turns the cache and the
upstream gradient into ``(grad_input, grad_params)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, ContractError, ShapeError

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


@dataclass
class LayerCache:
    kind: str
    out_shape: tuple
    saved: dict = field(default_factory=dict)


def _same_pads(k):
    before = (k - 1) // 2
    return before, k - 1 - before


def _as5d(x, nsp):
    # [N, *spatial, C] -> [N, D, H, W, C]
    if nsp == 2:
        return x[:, None]
    return x


# ---------------------------------------------------------------- convolution


def conv_output_shape(in_spatial, kernel_spatial, padding):
    if padding == "same":
        return tuple(in_spatial)
    if padding == "valid":
        return tuple(n - k + 1 for n, k in zip(in_spatial, kernel_spatial))
    raise ArgumentError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv_forward(x, kernel, bias, padding="same", mode="eval"):
    """Stride-1 cross-correlation plus per-channel bias.

    ``kernel`` is ``[kh, kw, c_in, c_out]`` or ``[kd, kh, kw, c_in, c_out]``;
    the spatial rank of ``x`` follows from it. Same padding zero-pads
    ``(k - 1) // 2`` before and the rest after, per axis.
    """
    nsp = kernel.ndim - 2
    if nsp not in (2, 3):
        raise ShapeError(f"kernel must be rank 4 or 5, got rank {kernel.ndim}")
    if x.ndim != nsp + 2:
        raise ShapeError(f"{nsp}-D convolution expects input rank {nsp + 2}, got {x.shape}")
    if x.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {kernel.shape[-2]}")
    if bias.shape != (kernel.shape[-1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[-1]} output channels")
    ksp = kernel.shape[:nsp]
    out_sp = conv_output_shape(x.shape[1:-1], ksp, padding)
    if any(n < 1 for n in out_sp):
        raise ShapeError(f"valid convolution of {x.shape[1:-1]} by {ksp} leaves {out_sp}")

    x5 = _as5d(x, nsp)
    w5 = kernel[None] if nsp == 2 else kernel
    if padding == "same":
        pads = [(0, 0)] + [_same_pads(k) for k in w5.shape[:3]] + [(0, 0)]
        x5 = np.pad(x5, pads)
    x5 = np.ascontiguousarray(x5)
    w5 = np.ascontiguousarray(w5, dtype=x5.dtype)
    y5 = kernels.conv_forward(x5, w5)
    y5 += bias.astype(y5.dtype, copy=False)
    y = y5[:, 0] if nsp == 2 else y5
    cache = LayerCache(
        "conv", y.shape,
        {"x5": x5, "w5": w5, "nsp": nsp, "padding": padding, "in_shape": x.shape},
    )
    return y, cache


def conv2d_forward(x, kernel, bias, padding="same", mode="eval"):
    if kernel.ndim != 4:
        raise ShapeError("conv2d kernel must be [kh, kw, c_in, c_out]")
    return conv_forward(x, kernel, bias, padding, mode)


def conv3d_forward(x, kernel, bias, padding="same", mode="eval"):
    if kernel.ndim != 5:
        raise ShapeError("conv3d kernel must be [kd, kh, kw, c_in, c_out]")
    return conv_forward(x, kernel, bias, padding, mode)


def conv_backward(g, cache):
    s = cache.saved
    x5, w5, nsp = s["x5"], s["w5"], s["nsp"]
    g5 = np.ascontiguousarray(_as5d(g, nsp), dtype=x5.dtype)
    gw = kernels.conv_grad_weight(x5, g5, w5.shape[:3])
    gx5 = kernels.conv_grad_input(g5, w5, x5.shape)
    if s["padding"] == "same":
        crop = tuple(slice(_same_pads(k)[0], _same_pads(k)[0] + n)
                     for k, n in zip(w5.shape[:3], g5.shape[1:4]))
        gx5 = gx5[(slice(None),) + crop]
    gx = gx5[:, 0] if nsp == 2 else gx5
    gb = g5.sum(axis=(0, 1, 2, 3))
    return np.ascontiguousarray(gx), {"kernel": gw[0] if nsp == 2 else gw, "bias": gb}


# ---------------------------------------------------------------- pooling


def maxpool_output_shape(in_spatial, pool, strides):
    return tuple((n - p) // s + 1 for n, p, s in zip(in_spatial, pool, strides))


def maxpool_forward(x, pool, strides=None, mode="eval"):
    """Max over each window; windows overrunning the input are dropped.

    Ties resolve to the first position in row-major window order.
    """
    pool = tuple(int(p) for p in pool)
    strides = pool if strides is None else tuple(int(s) for s in strides)
    nsp = len(pool)
    if nsp not in (2, 3) or len(strides) != nsp or x.ndim != nsp + 2:
        raise ShapeError(f"pool {pool} / strides {strides} do not fit input {x.shape}")
    if any(p < 1 for p in pool) or any(s < 1 for s in strides):
        raise ShapeError("pool sizes and strides must be positive")
    if any(p > n for p, n in zip(pool, x.shape[1:-1])):
        raise ShapeError(f"pool {pool} larger than input {x.shape[1:-1]}")
    x5 = np.ascontiguousarray(_as5d(x, nsp))
    p5 = (1,) + pool if nsp == 2 else pool
    s5 = (1,) + strides if nsp == 2 else strides
    y5, arg = kernels.maxpool_forward(x5, p5, s5)
    y = y5[:, 0] if nsp == 2 else y5
    return y, LayerCache("maxpool", y.shape,
                         {"arg": arg, "pool": p5, "strides": s5, "in5": x5.shape, "nsp": nsp})


def maxpool_backward(g, cache):
    s = cache.saved
    g5 = np.ascontiguousarray(_as5d(g, s["nsp"]))
    gx5 = kernels.maxpool_backward(g5, s["arg"], s["in5"], s["pool"], s["strides"])
    return (gx5[:, 0] if s["nsp"] == 2 else gx5), {}


# ---------------------------------------------------------------- batch norm


def batchnorm_forward(x, params, mode="eval", momentum=BN_MOMENTUM, epsilon=BN_EPSILON):
    """Per-channel normalisation over the batch and all spatial positions.

    In train mode the moving statistics in ``params`` are updated in place:
    ``moving = momentum * moving + (1 - momentum) * batch``. Calibrate mode
    normalises with batch statistics but leaves the moving ones alone.
    """
    if x.shape[0] == 0:
        raise ArgumentError("batch normalisation needs a non-empty batch")
    gamma, beta = params["gamma"], params["beta"]
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[-1]} channels, batch norm has {gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    if mode in ("train", "calibrate"):
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if mode == "train":
            params["moving_mean"] *= momentum
            params["moving_mean"] += (1 - momentum) * mean
            params["moving_var"] *= momentum
            params["moving_var"] += (1 - momentum) * var
    elif mode == "eval":
        mean, var = params["moving_mean"], params["moving_var"]
    else:
        raise ArgumentError(f"mode must be 'train', 'eval' or 'calibrate', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    y = (gamma * xhat + beta).astype(x.dtype, copy=False)
    return y, LayerCache("batchnorm", y.shape, {
        "xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mode": mode,
        "mean": mean, "var": var, "count": x.size // x.shape[-1],
    })


def batchnorm_backward(g, cache):
    s = cache.saved
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    axes = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    if s["mode"] == "eval":
        gx = g * gamma * inv_std
    else:
        m = g.size // g.shape[-1]
        gx = (gamma * inv_std / m) * (m * g - dbeta - xhat * dgamma)
    return gx.astype(g.dtype, copy=False), {"gamma": dgamma, "beta": dbeta}


# ---------------------------------------------------------------- activations


def relu(x, mode="eval"):
    # np.maximum keeps NaN, so a poisoned input still surfaces as a bad loss
    mask = x > 0
    return np.maximum(x, 0).astype(x.dtype, copy=False), LayerCache("relu", x.shape, {"mask": mask})


def relu_backward(g, cache):
    return np.where(cache.saved["mask"], g, 0).astype(g.dtype, copy=False), {}


def dropout(x, rate, mode="eval", rng=None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0:
        return x, LayerCache("dropout", x.shape, {"scale": None})
    if rng is None:
        raise ArgumentError("train-mode dropout needs a random stream")
    keep = rng.random(x.shape) >= rate
    scale = np.where(keep, 1.0 / (1.0 - rate), 0.0).astype(x.dtype)
    return x * scale, LayerCache("dropout", x.shape, {"scale": scale})


def dropout_backward(g, cache):
    scale = cache.saved["scale"]
    return (g if scale is None else g * scale), {}


def flatten(x, mode="eval"):
    return x.reshape(x.shape[0], -1), LayerCache("flatten", (x.shape[0], x[0].size), {"in_shape": x.shape})


def flatten_backward(g, cache):
    return g.reshape(cache.saved["in_shape"]), {}


# ---------------------------------------------------------------- dense


def dense_forward(x, w, b, mode="eval"):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shapes do not agree: x {x.shape}, w {w.shape}, b {b.shape}")
    y = x @ w + b
    return y, LayerCache("dense", y.shape, {"x": x, "w": w})


def dense_backward(g, cache):
    x, w = cache.saved["x"], cache.saved["w"]
    return g @ w.T, {"kernel": x.T @ g, "bias": g.sum(axis=0)}


# ---------------------------------------------------------------- loss


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ArgumentError(f"logits must be [batch, classes] with batch >= 1, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ArgumentError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ArgumentError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_sum - z[rows, labels]))
    grad = np.exp(z - log_sum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------- dispatch

_BACKWARD = {
    "conv": conv_backward,
    "conv2d": conv_backward,
    "conv3d": conv_backward,
    "maxpool": maxpool_backward,
    "batchnorm": batchnorm_backward,
    "relu": relu_backward,
    "dropout": dropout_backward,
    "flatten": flatten_backward,
    "dense": dense_backward,
}


def layer_backward(kind, grad_out, cache):
    """Vector-Jacobian product of one layer; returns ``(grad_in, grad_params)``."""
    if kind not in _BACKWARD:
        raise ArgumentError(f"unknown layer kind {kind!r}")
    expected = "conv" if kind in ("conv2d", "conv3d") else kind
    if not isinstance(cache, LayerCache) or cache.kind != expected:
        got = getattr(cache, "kind", type(cache).__name__)
        raise ContractError(f"{kind} backward was given a cache from {got!r}")
    if tuple(grad_out.shape) != tuple(cache.out_shape):
        raise ContractError(f"{kind} gradient has shape {grad_out.shape}, forward produced {cache.out_shape}")
    return _BACKWARD[kind](grad_out, cache)
