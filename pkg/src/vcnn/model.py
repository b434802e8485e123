"""Sequential network descriptions, the two published architectures, and checkpoints."""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from ._fs import atomic_write_bytes
from .errors import ShapeError
from .tensor import resolve_dtype

CLASS_NAMES = ["newborn", "1yr", "3yr"]
MAGIC = b"VCNN1"
FORMAT_VERSION = 1

TRAINABLE = {
    "conv2d": ("kernel", "bias"),
    "conv3d": ("kernel", "bias"),
    "dense": ("kernel", "bias"),
    "batchnorm": ("gamma", "beta"),
}
NON_TRAINABLE = {"batchnorm": ("moving_mean", "moving_var")}


@dataclass
class LayerSpec:
    kind: str
    name: str
    filters: Optional[int] = None
    kernel: Optional[Tuple[int, ...]] = None
    padding: Optional[str] = None
    pool: Optional[Tuple[int, ...]] = None
    strides: Optional[Tuple[int, ...]] = None
    rate: Optional[float] = None
    units: Optional[int] = None
    activation: Optional[str] = None

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("kernel", "pool", "strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ModelSpec:
    model_id: str
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec]
    params: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    class_names: List[str] = field(default_factory=lambda: list(CLASS_NAMES))
    dtype: str = "f32"
    bn_momentum: float = L.BN_MOMENTUM
    bn_epsilon: float = L.BN_EPSILON
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def architecture(self):
        """Everything that fixes the parameter layout, as plain data."""
        return {
            "model_id": self.model_id,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "class_names": list(self.class_names),
        }


# ---------------------------------------------------------------- builders


class _Namer:
    def __init__(self):
        self.counts = {}

    def __call__(self, prefix):
        self.counts[prefix] = self.counts.get(prefix, 0) + 1
        return f"{prefix}_{self.counts[prefix]}"


def build_model_2d(input_size=80, width_divisor=1, model_id="cnn2d"):
    """The 2-D network: an ``input_size``-square image whose channels are the
    ``input_size`` depth slices of the volume."""
    nm = _Namer()
    w = lambda c: max(1, c // width_divisor)

    def conv(c):
        return LayerSpec("conv2d", nm("conv2d"), filters=w(c), kernel=(3, 3),
                         padding="same", activation="relu")

    def tail():
        return [
            LayerSpec("batchnorm", nm("batch_normalization")),
            LayerSpec("maxpool", nm("max_pooling2d"), pool=(2, 2), strides=(2, 2)),
            LayerSpec("dropout", nm("dropout"), rate=0.2),
        ]

    layers = [conv(32)] + [conv(64) for _ in range(4)] + tail()
    layers += [conv(128), conv(128)] + tail()
    layers += [conv(256), conv(256), conv(256)] + tail()
    layers += _classifier(nm, w)
    return ModelSpec(model_id, (input_size, input_size, input_size), layers)


def build_model_3d(input_size=80, width_divisor=1, conv_padding="valid", model_id="cnn3d"):
    """The 3-D network on a single-channel ``input_size`` cube.

    The first convolution is always same-padded; ``conv_padding`` applies to
    the nine after it (valid in the published model).
    """
    nm = _Namer()
    w = lambda c: max(1, c // width_divisor)

    def conv(c, k=3, padding=conv_padding):
        return LayerSpec("conv3d", nm("conv3d"), filters=w(c), kernel=(k, k, k),
                         padding=padding, activation="relu")

    def bn_pool():
        return [
            LayerSpec("batchnorm", nm("batch_normalization")),
            LayerSpec("maxpool", nm("max_pooling3d"), pool=(1, 2, 2), strides=(1, 2, 2)),
        ]

    def drop():
        return LayerSpec("dropout", nm("dropout"), rate=0.2)

    layers = [conv(32, padding="same")] + bn_pool()
    layers += [conv(64) for _ in range(4)] + bn_pool() + [drop()]
    layers += [conv(128), conv(128)] + bn_pool() + [drop()]
    layers += [conv(256, k=2), conv(256, k=2), conv(256)] + bn_pool() + [drop()]
    layers += _classifier(nm, w)
    return ModelSpec(model_id, (input_size,) * 3 + (1,), layers)


def _classifier(nm, w):
    return [
        LayerSpec("flatten", nm("flatten")),
        LayerSpec("dense", nm("dense"), units=w(1024), activation="relu"),
        LayerSpec("dropout", nm("dropout"), rate=0.2),
        LayerSpec("dense", nm("dense"), units=w(512), activation="relu"),
        LayerSpec("dropout", nm("dropout"), rate=0.2),
        LayerSpec("dense", nm("dense"), units=len(CLASS_NAMES)),
    ]


def build_model_3d_small(input_size=32):
    # valid padding cannot survive a 32^3 input (the in-plane extent hits 0 at
    # conv3d_7), so the small variant pads every convolution
    return build_model_3d(input_size=input_size, width_divisor=4, conv_padding="same",
                          model_id="cnn3d-small")


BUILDERS = {
    "cnn2d": build_model_2d,
    "cnn3d": build_model_3d,
    "cnn3d-small": build_model_3d_small,
}


def build_model(name, input_size=None):
    """Architecture by name, optionally at a non-default cubic input size."""
    if name not in BUILDERS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(BUILDERS)}")
    if input_size is None:
        return BUILDERS[name]()
    return BUILDERS[name](input_size=int(input_size))


# ---------------------------------------------------------------- shapes and counts


def _layer_output(spec, shape):
    if spec.kind in ("conv2d", "conv3d"):
        nsp = 2 if spec.kind == "conv2d" else 3
        if len(shape) != nsp + 1:
            raise ShapeError(f"{spec.name}: expects rank-{nsp + 1} input, got {shape}")
        sp = L.conv_output_shape(shape[:-1], spec.kernel, spec.padding)
        return sp + (spec.filters,)
    if spec.kind == "maxpool":
        if any(p > n for p, n in zip(spec.pool, shape[:-1])):
            raise ShapeError(f"{spec.name}: pool {spec.pool} larger than input {shape[:-1]}")
        return L.maxpool_output_shape(shape[:-1], spec.pool, spec.strides) + (shape[-1],)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{spec.name}: dense layer needs a flat input, got {shape}")
        return (spec.units,)
    return tuple(shape)


def infer_shapes(m: ModelSpec):
    """Per-layer output shapes (batch axis omitted)."""
    shape = tuple(m.input_shape)
    out = []
    for spec in m.layers:
        shape = _layer_output(spec, shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"shape underflow at layer {spec.name}: output {shape}")
        out.append((spec.name, shape))
    return out


def param_shapes(m: ModelSpec):
    """``{layer: {param: shape}}`` for every layer holding parameters."""
    shapes = {}
    prev = tuple(m.input_shape)
    for spec, (_, out_shape) in zip(m.layers, infer_shapes(m)):
        if spec.kind in ("conv2d", "conv3d"):
            shapes[spec.name] = {
                "kernel": tuple(spec.kernel) + (prev[-1], spec.filters),
                "bias": (spec.filters,),
            }
        elif spec.kind == "dense":
            shapes[spec.name] = {"kernel": (prev[0], spec.units), "bias": (spec.units,)}
        elif spec.kind == "batchnorm":
            c = (prev[-1],)
            shapes[spec.name] = {"gamma": c, "beta": c, "moving_mean": c, "moving_var": c}
        prev = out_shape
    return shapes


def count_params(m: ModelSpec):
    """Returns ``(per_layer, trainable, non_trainable)``; ``per_layer`` is a list
    of ``(name, count)`` in layer order, zero for parameter-free layers."""
    shapes = param_shapes(m)
    per_layer = []
    trainable = non_trainable = 0
    for spec in m.layers:
        ps = shapes.get(spec.name, {})
        t = sum(int(np.prod(ps[p])) for p in TRAINABLE.get(spec.kind, ()))
        nt = sum(int(np.prod(ps[p])) for p in NON_TRAINABLE.get(spec.kind, ()))
        per_layer.append((spec.name, t + nt))
        trainable += t
        non_trainable += nt
    return per_layer, trainable, non_trainable


# ---------------------------------------------------------------- parameters


def init_params(m: ModelSpec, seed: int, dtype=None) -> ModelSpec:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases, unit gamma,
    zero beta, moving mean 0 and moving variance 1."""
    dtype = m.dtype if dtype is None else dtype
    dt = resolve_dtype(dtype)
    params = {}
    for i, (name, ps) in enumerate(param_shapes(m).items()):
        kind = m.layer(name).kind
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, i]))
        if kind == "batchnorm":
            c = ps["gamma"]
            params[name] = {
                "gamma": np.ones(c, dt), "beta": np.zeros(c, dt),
                "moving_mean": np.zeros(c, dt), "moving_var": np.ones(c, dt),
            }
        else:
            kshape = ps["kernel"]
            fan_in = int(np.prod(kshape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = {
                "kernel": rng.uniform(-bound, bound, size=kshape).astype(dt),
                "bias": np.zeros(ps["bias"], dt),
            }
    return replace(m, params=params, dtype="f32" if dt == np.float32 else "f64")


def clone_params(params):
    return {ln: {pn: a.copy() for pn, a in ps.items()} for ln, ps in params.items()}


def trainable_items(m: ModelSpec):
    """``(layer, param)`` keys of every trainable array, in layer order."""
    out = []
    for spec in m.layers:
        for p in TRAINABLE.get(spec.kind, ()):
            out.append((spec.name, p))
    return out


# ---------------------------------------------------------------- execution


def volume_to_input(m: ModelSpec, voxels):
    """Lay a ``[d, h, w]`` volume out the way the model's first layer expects."""
    voxels = np.asarray(voxels)
    if len(m.input_shape) == 3:
        # depth slices become channels
        x = np.moveaxis(voxels, 0, -1)
    else:
        x = voxels[..., None]
    return np.ascontiguousarray(x, dtype=resolve_dtype(m.dtype))


def forward(m: ModelSpec, x, mode="eval", rng=None, stop_before=None):
    """Run the network on a batch ``[N, *input_shape]``.

    Returns ``(logits [N, 3], caches)``. Eval mode disables dropout and uses
    the batch-norm moving statistics; train mode updates those statistics.
    With ``stop_before`` set to a layer name, returns that layer's input
    (and the caches so far) instead.
    """
    x = np.asarray(x)
    if tuple(x.shape[1:]) != tuple(m.input_shape):
        raise ShapeError(f"{m.model_id} expects inputs {tuple(m.input_shape)}, got {tuple(x.shape[1:])}")
    if not m.params:
        raise ValueError("model has no parameters; call init_params first")
    x = x.astype(resolve_dtype(m.dtype), copy=False)
    caches = []
    for spec in m.layers:
        if spec.name == stop_before:
            return x, caches
        p = m.params.get(spec.name)
        if spec.kind in ("conv2d", "conv3d"):
            x, c = L.conv_forward(x, p["kernel"], p["bias"], spec.padding, mode)
        elif spec.kind == "dense":
            x, c = L.dense_forward(x, p["kernel"], p["bias"], mode)
        elif spec.kind == "batchnorm":
            x, c = L.batchnorm_forward(x, p, mode, m.bn_momentum, m.bn_epsilon)
        elif spec.kind == "maxpool":
            x, c = L.maxpool_forward(x, spec.pool, spec.strides, mode)
        elif spec.kind == "dropout":
            x, c = L.dropout(x, spec.rate, mode, rng)
        elif spec.kind == "flatten":
            x, c = L.flatten(x, mode)
        else:
            raise ValueError(f"unsupported layer kind {spec.kind!r}")
        entry = [(spec.kind, c)]
        if spec.activation == "relu":
            x, c = L.relu(x, mode)
            entry.append(("relu", c))
        caches.append(entry)
    if stop_before is not None:
        raise ValueError(f"no layer named {stop_before!r}")
    return x, caches


def backward(m: ModelSpec, grad_logits, caches):
    """Gradients of every trainable parameter, ``{layer: {param: array}}``."""
    grads = {}
    g = grad_logits
    for spec, entry in zip(reversed(m.layers), reversed(caches)):
        for kind, c in reversed(entry):
            g, gp = L.layer_backward(kind, g, c)
            if gp:
                grads[spec.name] = gp
    return grads


def predict(m: ModelSpec, x):
    logits, _ = forward(m, x, mode="eval")
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _blob_list(m: ModelSpec):
    out = []
    for spec in m.layers:
        for p in TRAINABLE.get(spec.kind, ()) + NON_TRAINABLE.get(spec.kind, ()):
            out.append((spec.name, p))
    return out


def checkpoint_bytes(m: ModelSpec, epoch=0, seed=None) -> bytes:
    le = "<f4" if m.dtype == "f32" else "<f8"
    blobs = []
    entries = []
    for layer, p in _blob_list(m):
        a = np.ascontiguousarray(m.params[layer][p], dtype=le)
        entries.append({"layer": layer, "param": p, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = dict(m.architecture())
    header.update({
        "format": FORMAT_VERSION,
        "dtype": m.dtype,
        "epoch": int(epoch),
        "seed": seed,
        "bn_momentum": m.bn_momentum,
        "bn_epsilon": m.bn_epsilon,
        "blobs": entries,
    })
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)


def save_checkpoint(m: ModelSpec, path, epoch=0, seed=None):
    atomic_write_bytes(path, checkpoint_bytes(m, epoch, seed))


def read_checkpoint_header(raw: bytes):
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedCheckpointError("file too short for a checkpoint preamble")
    if raw[:len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("bad magic bytes; not a VCNN1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if start + n > len(raw):
        raise TruncatedCheckpointError(f"header declares {n} bytes, only {len(raw) - start} present")
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptHeaderError("header is not a JSON object")
    required = ("model_id", "input_shape", "layers", "dtype", "blobs", "class_names")
    missing = [k for k in required if k not in header]
    if missing:
        raise CorruptHeaderError(f"header missing fields {missing}")
    if header["dtype"] not in ("f32", "f64"):
        raise CorruptHeaderError(f"unsupported dtype {header['dtype']!r}")
    return header, start + n


def load_checkpoint(path, expected=None) -> ModelSpec:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``expected`` (a model name or :class:`ModelSpec`) makes the load fail with
    :class:`ArchitectureMismatchError` unless the stored architecture matches.
    The stored epoch and seed are available as ``m.meta``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header, offset = read_checkpoint_header(raw)
    try:
        m = ModelSpec(
            header["model_id"], tuple(header["input_shape"]),
            [LayerSpec.from_dict(d) for d in header["layers"]],
            class_names=list(header["class_names"]), dtype=header["dtype"],
            bn_momentum=header.get("bn_momentum", L.BN_MOMENTUM),
            bn_epsilon=header.get("bn_epsilon", L.BN_EPSILON),
        )
        shapes = param_shapes(m)
    except (TypeError, ValueError, KeyError) as exc:
        raise CorruptHeaderError(f"invalid layer list: {exc}") from None

    if expected is not None:
        ref = build_model(expected) if isinstance(expected, str) else expected
        if ref.architecture() != m.architecture():
            raise ArchitectureMismatchError(
                f"checkpoint holds {m.model_id!r}, expected {ref.model_id!r} architecture")

    want = _blob_list(m)
    got = [(b["layer"], b["param"]) for b in header["blobs"]]
    if got != want:
        raise ArchitectureMismatchError("blob list does not match the header's layer list")

    le = np.dtype("<f4" if m.dtype == "f32" else "<f8")
    native = resolve_dtype(m.dtype)
    params = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        if shape != tuple(shapes[entry["layer"]][entry["param"]]):
            raise ArchitectureMismatchError(
                f"{entry['layer']}.{entry['param']} stored as {shape}, layer list implies "
                f"{shapes[entry['layer']][entry['param']]}")
        nbytes = int(np.prod(shape)) * le.itemsize
        if offset + nbytes > len(raw):
            raise TruncatedCheckpointError(
                f"blob {entry['layer']}.{entry['param']} truncated "
                f"({len(raw) - offset} of {nbytes} bytes)")
        a = np.frombuffer(raw, dtype=le, count=int(np.prod(shape)), offset=offset)
        params.setdefault(entry["layer"], {})[entry["param"]] = a.reshape(shape).astype(native)
        offset += nbytes
    if offset != len(raw):
        raise CorruptHeaderError(f"{len(raw) - offset} trailing bytes after the last blob")
    m.params = params
    m.meta = {"epoch": header.get("epoch"), "seed": header.get("seed")}
    return m
