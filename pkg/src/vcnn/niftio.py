"""NIfTI-1 volumes, resampling, intensity scaling, manifests and phantoms."""

import csv
import gzip
import io
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._fs import atomic_write_bytes
from .model import CLASS_NAMES

AGE_CLASSES = tuple(CLASS_NAMES)
MODALITIES = ("T1", "T2", "PD", "synthetic")

HEADER_SIZE = 348
NIFTI2_HEADER_SIZE = 540
DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}
MAGICS = (b"n+1\x00", b"ni1\x00")


class NiftiError(Exception):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    voxel_dims_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "synthetic"
    subject_id: str = ""
    age_class: Optional[str] = None
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3-D with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def label(self):
        return None if self.age_class is None else AGE_CLASSES.index(self.age_class)


def age_class_name(c):
    if isinstance(c, (int, np.integer)):
        return AGE_CLASSES[int(c)]
    if c not in AGE_CLASSES:
        raise ValueError(f"unknown age class {c!r}; expected one of {AGE_CLASSES}")
    return c


# ---------------------------------------------------------------- NIfTI-1


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedDataError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _byte_order(raw, path):
    for order in ("<", ">"):
        (n,) = struct.unpack_from(order + "i", raw, 0)
        if n == HEADER_SIZE:
            return order
        if n == NIFTI2_HEADER_SIZE:
            raise UnsupportedFormatError(f"{path}: NIfTI-2 files are not supported")
    raise BadMagicError(f"{path}: sizeof_hdr is not 348 in either byte order")


def parse_header(raw, path="<bytes>"):
    """Decode the fields of a 348-byte NIfTI-1 header that the reader honours."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    o = _byte_order(raw, path)
    magic = raw[344:348]
    if magic not in MAGICS:
        raise BadMagicError(f"{path}: magic {magic!r} is not 'n+1' or 'ni1'")
    dim = struct.unpack_from(o + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(o + "2h", raw, 70)
    pixdim = struct.unpack_from(o + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(o + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(o + "2h", raw, 252)
    srow = struct.unpack_from(o + "12f", raw, 280)
    return {
        "byteorder": o,
        "magic": magic,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "srow": srow,
    }


def _image_path(path):
    p = os.fspath(path)
    for hdr, img in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if p.endswith(hdr):
            return p[: -len(hdr)] + img
    raise UnsupportedFormatError(f"{p}: 'ni1' header without a .hdr extension")


def read_nifti(path, modality="T1", subject_id=None, age_class=None) -> Volume:
    """Load a single-frame 3-D NIfTI-1 volume (``.nii``, ``.nii.gz`` or a
    ``.hdr``/``.img`` pair) with scl_slope/scl_inter applied.

    Voxels come back as ``float64`` indexed ``[i, j, k]`` along dim[1..3].
    """
    raw = _read_bytes(path)
    h = parse_header(raw, path)
    ndim = h["dim"][0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in h["dim"][4:ndim + 1]):
        raise UnsupportedFormatError(f"{path}: only single-frame 3-D images are supported (dim={h['dim']})")
    shape = tuple(int(d) for d in h["dim"][1:4])
    if min(shape) < 1:
        raise UnsupportedFormatError(f"{path}: non-positive dimension in {shape}")
    if h["datatype"] not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {h['datatype']} not in {sorted(DATATYPES)}")
    dt = np.dtype(DATATYPES[h["datatype"]]).newbyteorder(h["byteorder"])
    if h["bitpix"] != dt.itemsize * 8:
        raise UnsupportedDatatypeError(f"{path}: bitpix {h['bitpix']} disagrees with datatype {h['datatype']}")

    if h["magic"] == b"ni1\x00":
        data = _read_bytes(_image_path(path))
        offset = int(h["vox_offset"])
    else:
        data = raw
        offset = int(h["vox_offset"])
        if offset < HEADER_SIZE:
            raise TruncatedDataError(f"{path}: vox_offset {offset} inside the header")
    n = int(np.prod(shape))
    need = offset + n * dt.itemsize
    if len(data) < need:
        raise TruncatedDataError(f"{path}: voxel data needs {need} bytes, file has {len(data)}")
    arr = np.frombuffer(data, dtype=dt, count=n, offset=offset).reshape(shape, order="F")
    vox = arr.astype(np.float64)
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope != 0 and np.isfinite(slope):
        vox = vox * float(slope) + float(inter)
    pixdim = tuple(abs(float(p)) if p > 0 else 1.0 for p in h["pixdim"][1:4])
    affine = None
    if h["sform_code"] > 0:
        affine = np.vstack([np.reshape(h["srow"], (3, 4)), [0, 0, 0, 1]])
    return Volume(
        np.ascontiguousarray(vox), pixdim, modality,
        subject_id if subject_id is not None else os.path.basename(os.fspath(path)),
        None if age_class is None else age_class_name(age_class), affine,
    )


def nifti_bytes(voxels, voxel_dims=(1.0, 1.0, 1.0), datatype="float32", byteorder="<",
                scl_slope=0.0, scl_inter=0.0) -> bytes:
    """Serialise ``voxels`` (stored values, before any scl rescaling) as a
    single-file NIfTI-1 image."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {voxels.shape}")
    code = DATATYPE_CODES[datatype]
    dt = np.dtype(DATATYPES[code]).newbyteorder(byteorder)
    if np.issubdtype(dt, np.integer):
        info = np.iinfo(dt)
        if not np.array_equal(voxels, np.round(voxels)) or voxels.min() < info.min or voxels.max() > info.max:
            raise ValueError(f"values do not fit {datatype}")
    o = byteorder
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(o + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(o + "8h", hdr, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into(o + "2h", hdr, 70, code, dt.itemsize * 8)
    struct.pack_into(o + "8f", hdr, 76, 1.0, *[float(d) for d in voxel_dims], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(o + "3f", hdr, 108, 352.0, scl_slope, scl_inter)
    hdr[123] = 2  # xyzt_units: millimetres
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(voxels).astype(dt).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + body


def write_nifti(path, voxels, voxel_dims=(1.0, 1.0, 1.0), datatype="float32", byteorder="<",
                scl_slope=0.0, scl_inter=0.0):
    data = nifti_bytes(voxels, voxel_dims, datatype, byteorder, scl_slope, scl_inter)
    if os.fspath(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    atomic_write_bytes(path, data)


def write_volume(path, v: Volume):
    write_nifti(path, v.voxels, v.voxel_dims_mm, "float32")


# ---------------------------------------------------------------- preprocessing


def _axis_weights(n_src, n_dst):
    if n_dst == 1:
        pos = np.array([(n_src - 1) / 2.0])
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    return pos


def _interp_axis(a, axis, n_dst, method):
    n_src = a.shape[axis]
    pos = _axis_weights(n_src, n_dst)
    if method == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, n_src - 1)
        return np.take(a, idx, axis=axis)
    if n_src == 1:
        return np.repeat(a, n_dst, axis=axis)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_src - 2)
    frac = pos - i0
    shape = [1] * a.ndim
    shape[axis] = n_dst
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i0 + 1, axis=axis) * frac


def resample(v: Volume, target: Sequence[int], method="trilinear") -> Volume:
    """Resize to ``target`` with corner-aligned sampling: output index ``i``
    reads source position ``i * (n_src - 1) / (n_dst - 1)``."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three dims >= 1, got {target}")
    if method not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling method {method!r}")
    a = np.asarray(v.voxels, dtype=np.float64)
    for axis, n in enumerate(target):
        if a.shape[axis] != n:
            a = _interp_axis(a, axis, n, method)
    dims = tuple(
        d * (s - 1) / (t - 1) if s > 1 and t > 1 else d
        for d, s, t in zip(v.voxel_dims_mm, v.voxels.shape, target)
    )
    return Volume(np.ascontiguousarray(a), dims, v.modality, v.subject_id, v.age_class, v.affine)


def normalize_intensity(v: Volume) -> Volume:
    a = np.asarray(v.voxels, dtype=np.float64)
    lo, hi = a.min(), a.max()
    out = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    return Volume(out, v.voxel_dims_mm, v.modality, v.subject_id, v.age_class, v.affine)


def preprocess(v: Volume, size) -> Volume:
    """Intensity normalisation followed by trilinear resizing to a ``size`` cube."""
    return resample(normalize_intensity(v), (size, size, size))


# ---------------------------------------------------------------- phantoms

# outer radius, core radius fraction, core contrast per age class
PHANTOM_GEOMETRY = {
    "newborn": (0.55, 0.55, 0.35),
    "1yr": (0.68, 0.60, 0.60),
    "3yr": (0.80, 0.65, 0.85),
}
TISSUE_INTENSITY = 0.3


def gen_phantom(age_class, subject_seed, size=80, noise=0.05) -> Volume:
    """Synthetic head: an ellipsoid of soft tissue around a brighter core.

    Both the head radius and the core contrast grow with the age class; each
    subject seed jitters radius, contrast, centre and axis scaling a little and
    adds Gaussian noise of standard deviation ``noise``.
    """
    name = age_class_name(age_class)
    radius, core_frac, contrast = PHANTOM_GEOMETRY[name]
    rng = np.random.default_rng(np.random.SeedSequence([AGE_CLASSES.index(name), subject_seed & 0xFFFFFFFF]))
    radius *= 1 + rng.uniform(-0.04, 0.04)
    contrast += rng.uniform(-0.04, 0.04)
    centre = rng.uniform(-0.04, 0.04, size=3)
    stretch = 1 + rng.uniform(-0.05, 0.05, size=3)

    ax = np.linspace(-1.0, 1.0, size)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    r = np.sqrt(((z - centre[0]) / stretch[0]) ** 2
                + ((y - centre[1]) / stretch[1]) ** 2
                + ((x - centre[2]) / stretch[2]) ** 2)
    vox = np.where(r < radius, TISSUE_INTENSITY, 0.0)
    vox = np.where(r < radius * core_frac, contrast, vox)
    if noise > 0:
        vox = vox + rng.normal(0.0, noise, size=vox.shape)
    # float32-representable so a NIfTI float32 round trip is exact
    vox = vox.astype(np.float32).astype(np.float64)
    return Volume(vox, (1.0, 1.0, 1.0), "synthetic", f"{name}-{subject_seed}", name)


def interior_mean(v: Volume, fraction=0.15):
    """Mean voxel value inside a central ball of radius ``fraction`` (unit cube half-width)."""
    n = v.voxels.shape
    grids = np.meshgrid(*[np.linspace(-1, 1, k) for k in n], indexing="ij")
    r = np.sqrt(sum(g ** 2 for g in grids))
    return float(v.voxels[r < fraction].mean())


# ---------------------------------------------------------------- manifests

MANIFEST_COLUMNS = ("path", "subject_id", "modality", "age_class")


@dataclass
class ManifestRow:
    path: str
    subject_id: str
    modality: str
    age_class: str
    split: Optional[str] = None

    @property
    def label(self):
        return AGE_CLASSES.index(self.age_class)


def load_manifest(path) -> List[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise ManifestError(f"{path}: empty manifest")
    reader = csv.DictReader(io.StringIO(text))
    cols = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in cols]
    if missing:
        raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
    rows, seen = [], set()
    for lineno, rec in enumerate(reader, start=2):
        p = (rec["path"] or "").strip()
        if not p:
            raise ManifestError(f"{path}:{lineno}: empty path")
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {p!r}")
        if rec["age_class"] not in AGE_CLASSES:
            raise ManifestError(f"{path}:{lineno}: unknown age_class {rec['age_class']!r}")
        if rec["modality"] not in MODALITIES:
            raise ManifestError(f"{path}:{lineno}: unknown modality {rec['modality']!r}")
        split = (rec.get("split") or "").strip() or None
        if split not in (None, "train", "val"):
            raise ManifestError(f"{path}:{lineno}: split must be train or val, got {split!r}")
        seen.add(p)
        rows.append(ManifestRow(p, rec["subject_id"], rec["modality"], rec["age_class"], split))
    if not rows:
        raise ManifestError(f"{path}: manifest has a header but no rows")
    return rows


def manifest_bytes(rows: Sequence[ManifestRow]) -> bytes:
    buf = io.StringIO()
    with_split = any(r.split for r in rows)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS + (("split",) if with_split else ()))
    for r in rows:
        w.writerow([r.path, r.subject_id, r.modality, r.age_class] + ([r.split or ""] if with_split else []))
    return buf.getvalue().encode("utf-8")


def write_manifest(rows: Sequence[ManifestRow], path):
    atomic_write_bytes(path, manifest_bytes(rows))


def cohort_counts(rows: Sequence[ManifestRow]):
    """``{age_class: (scans, subjects)}`` over the three cohorts."""
    out = {}
    for c in AGE_CLASSES:
        sel = [r for r in rows if r.age_class == c]
        out[c] = (len(sel), len({r.subject_id for r in sel}))
    return out


def resolve(row: ManifestRow, manifest_path) -> str:
    if os.path.isabs(row.path):
        return row.path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), row.path)
