"""Dense row-major tensors.

The tensor type is a C-contiguous :class:`numpy.ndarray` of ``float32`` or
``float64``. The helpers here add the checks the rest of the engine relies
on: every dimension is at least 1, binary element-wise ops demand identical
shapes (only scalar broadcasting), and nothing mutates its inputs.
"""

from typing import Callable, Sequence, Union

import numpy as np

from .errors import RangeError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
Scalar = Union[int, float]


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ShapeError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dt}")
    return dt


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def as_tensor(x, dtype="f64") -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=resolve_dtype(dtype))
    check_shape(t.shape)
    return t


def zeros(shape: Sequence[int], dtype="f32") -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=resolve_dtype(dtype))


def ones_like(t: np.ndarray) -> np.ndarray:
    return np.ones_like(t)


def random_uniform(shape, lo: float, hi: float, seed: int, dtype="f64") -> np.ndarray:
    """Uniform samples in ``[lo, hi)``, reproducible for a given seed."""
    if not lo < hi:
        raise RangeError(f"random_uniform needs lo < hi, got lo={lo}, hi={hi}")
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    out = rng.uniform(lo, hi, size=check_shape(shape)).astype(dt)
    # rounding to f32 can land exactly on hi
    top = np.nextafter(dt.type(hi), dt.type(lo))
    np.minimum(out, top, out=out)
    return out


def _binary(a: np.ndarray, b, op) -> np.ndarray:
    if np.isscalar(b):
        return op(a, b)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return op(a, b)


def add(a, b):
    return _binary(np.asarray(a), b, np.add)


def sub(a, b):
    return _binary(np.asarray(a), b, np.subtract)


def hadamard(a, b):
    return _binary(np.asarray(a), b, np.multiply)


def scale(a, s: Scalar):
    if not np.isscalar(s):
        raise ShapeError("scale takes a scalar factor")
    return np.asarray(a) * s


def map_(fn: Callable, a) -> np.ndarray:
    out = np.asarray(fn(np.array(a, copy=True)))
    if out.shape != np.shape(a):
        raise ShapeError("map function changed the tensor shape")
    return out


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def reshape(t, new_shape) -> np.ndarray:
    t = np.asarray(t)
    new_shape = check_shape(new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def flat_offset(coord: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major offset of ``coord``; the last axis varies fastest."""
    if len(coord) != len(shape):
        raise ShapeError("coordinate rank does not match shape rank")
    off = 0
    for c, n in zip(coord, shape):
        if not 0 <= c < n:
            raise ShapeError(f"coordinate {tuple(coord)} outside shape {tuple(shape)}")
        off = off * n + c
    return off


def coord_of(offset: int, shape: Sequence[int]) -> tuple:
    total = int(np.prod(shape))
    if not 0 <= offset < total:
        raise ShapeError(f"offset {offset} outside shape {tuple(shape)}")
    coord = []
    for n in reversed(shape):
        offset, c = divmod(offset, n)
        coord.append(c)
    return tuple(reversed(coord))
