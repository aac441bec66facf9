"""Volumetric grids: types, AVOL/NIfTI-1 I/O, resampling, normalization, augmentation.

Arrays are stored as ``(nx, ny, nz)`` numpy arrays indexed ``[x, y, z]``.  The
on-disk payload is flattened x-fastest (Fortran order).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateIntensity, FormatError, InvalidVolume, UnsupportedDtype

__all__ = [
    "Volume3D",
    "LabelMap",
    "AugmentSpec",
    "resample",
    "zscore_normalize",
    "augment",
    "load_volume",
    "store_volume",
    "load_nifti",
]


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvalidVolume(f"dims must be three positive integers, got {dims}")
    return dims


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise InvalidVolume(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume3D:
    """Dense float32 scalar grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.size == 0:
            raise InvalidVolume(f"volume data must be a non-empty 3-d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidVolume("volume contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(self.data.shape)

    def flat(self):
        """Data as a flat x-fastest vector."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, flat, dims, spacing=(1.0, 1.0, 1.0)):
        dims = _check_dims(dims)
        flat = np.asarray(flat)
        if flat.size != dims[0] * dims[1] * dims[2]:
            raise InvalidVolume(f"data length {flat.size} does not match dims {dims}")
        return cls(flat.reshape(dims, order="F"), spacing)


@dataclass(frozen=True)
class LabelMap:
    """Integer atlas grid plus its label registry (0 is background)."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    registry: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3 or arr.size == 0:
            raise InvalidVolume(f"label data must be a non-empty 3-d array, got shape {arr.shape}")
        if arr.dtype.kind == "f" or (arr.size and arr.min() < 0):
            raise InvalidVolume("labels must be non-negative integers")
        arr = arr.astype(np.uint32)
        arr.flags.writeable = False
        registry = {int(k): str(v) for k, v in self.registry.items()}
        if 0 in registry:
            raise InvalidVolume("label 0 is reserved for background")
        present = set(np.unique(arr).tolist()) - {0}
        missing = present - set(registry)
        if missing:
            raise InvalidVolume(f"labels {sorted(missing)} are not in the registry")
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(self.labels.shape)

    def mask(self, label_id):
        return self.labels == np.uint32(label_id)

    def foreground(self):
        return self.labels != 0


@dataclass(frozen=True)
class AugmentSpec:
    """Symmetric augmentation ranges; every draw is uniform in ``[-r, r]``.

    ``scale`` is the half-width around 1, ``intensity_scale`` likewise.
    ``elastic_magnitude`` is the displacement stddev in voxels at control
    points spaced ``elastic_spacing`` voxels apart.
    """

    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation_vox: tuple = (0.0, 0.0, 0.0)
    scale: float = 0.0
    elastic_magnitude: float = 0.0
    elastic_spacing: float = 8.0
    noise_std: float = 0.0
    intensity_shift: float = 0.0
    intensity_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        ranges = (*self.rotation_deg, *self.translation_vox, self.scale,
                  self.elastic_magnitude, self.noise_std, self.intensity_shift, self.intensity_scale)
        if any(not math.isfinite(r) or r < 0 for r in ranges):
            raise ValueError("augmentation ranges must be finite and non-negative")
        if self.scale >= 1 or self.intensity_scale >= 1:
            raise ValueError("scale half-widths must be < 1")
        if self.elastic_spacing <= 0:
            raise ValueError("elastic_spacing must be positive")


def _axis_weights(n_in, n_out):
    """Corner-aligned linear interpolation matrix of shape (n_out, n_in)."""
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    w[rows, lo] += 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def _axis_nearest(n_in, n_out):
    if n_in == 1 or n_out == 1:
        pos = np.full(n_out, (n_in - 1) / 2.0)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    return np.clip(np.floor(pos + 0.5).astype(int), 0, n_in - 1)


def _resampled_spacing(spacing, dims, target):
    out = []
    for s, n, m in zip(spacing, dims, target):
        if n > 1 and m > 1:
            out.append(s * (n - 1) / (m - 1))
        else:
            out.append(s * n / m)
    return tuple(out)


def resample(v, target_dims, mode="trilinear"):
    """Resample to ``target_dims`` with corner-aligned sampling.

    The centers of the first and last voxel along each axis map onto each other,
    so the center-to-center physical extent is preserved.  Label maps must use
    ``mode="nearest"``.
    """
    target = _check_dims(target_dims)
    is_labels = isinstance(v, LabelMap)
    arr = v.labels if is_labels else v.data
    if arr.size == 0:
        raise InvalidVolume("cannot resample an empty volume")
    spacing = _resampled_spacing(v.spacing, arr.shape, target)
    if mode == "nearest":
        ix, iy, iz = (_axis_nearest(n, m) for n, m in zip(arr.shape, target))
        out = arr[np.ix_(ix, iy, iz)]
        if is_labels:
            return LabelMap(out, spacing, v.registry)
        return Volume3D(out, spacing)
    if mode != "trilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    if is_labels:
        raise ValueError("label maps must be resampled with mode='nearest'")
    if target == arr.shape:
        return Volume3D(arr.copy(), spacing)
    out = arr.astype(np.float64)
    for axis, m in enumerate(target):
        w = _axis_weights(out.shape[axis], m)
        out = np.moveaxis(np.tensordot(w, out, axes=([1], [axis])), 0, axis)
    # interpolation weights are convex; clip float32 rounding back into range
    out = np.clip(out, arr.min(), arr.max())
    return Volume3D(out.astype(np.float32), spacing)


def zscore_normalize(v):
    """Zero-mean, unit population-stddev intensities.

    A constant input (stddev < 1e-12) yields all zeros and emits a
    :class:`DegenerateIntensity` warning.
    """
    if v.data.size < 2:
        raise InvalidVolume("normalization needs at least two voxels")
    x = v.data.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if sd < 1e-12:
        warnings.warn("constant intensity; returning zeros", DegenerateIntensity, stacklevel=2)
        return Volume3D(np.zeros_like(x, dtype=np.float32), v.spacing)
    return Volume3D(((x - mu) / sd).astype(np.float32), v.spacing)


def _rotation(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(v, spec):
    """Random affine + elastic warp, Gaussian noise and intensity perturbation.

    The seed in ``spec`` fully determines the draw.  Draw order is fixed:
    rotation, translation, scale, elastic field, intensity scale, intensity
    shift, noise.
    """
    rng = np.random.default_rng(spec.seed)
    dims = v.dims
    rot = rng.uniform(-1, 1, 3) * np.asarray(spec.rotation_deg, dtype=float)
    trans = rng.uniform(-1, 1, 3) * np.asarray(spec.translation_vox, dtype=float)
    scale = 1.0 + rng.uniform(-1, 1) * spec.scale

    x = v.data.astype(np.float64)
    warp = spec.elastic_magnitude > 0
    if any(rot) or any(trans) or scale != 1.0 or warp:
        center = (np.asarray(dims, dtype=float) - 1) / 2
        grid = np.indices(dims, dtype=np.float64).reshape(3, -1)
        mat = _rotation(rot) / scale
        src = mat @ (grid - center[:, None]) + center[:, None] + trans[:, None]
        if warp:
            coarse = tuple(max(2, int(math.ceil(n / spec.elastic_spacing)) + 1) for n in dims)
            for axis in range(3):
                ctrl = rng.normal(0.0, spec.elastic_magnitude, coarse)
                dense = resample(Volume3D(ctrl), dims).data.astype(np.float64)
                src[axis] += dense.ravel()
        x = ndimage.map_coordinates(x, src, order=1, mode="nearest").reshape(dims)

    iscale = 1.0 + rng.uniform(-1, 1) * spec.intensity_scale
    ishift = rng.uniform(-1, 1) * spec.intensity_shift
    x = x * iscale + ishift
    if spec.noise_std > 0:
        x = x + rng.normal(0.0, spec.noise_std, dims)
    return Volume3D(x.astype(np.float32), v.spacing)


# --------------------------------------------------------------------------- I/O

_AVOL_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


def _avol_paths(path):
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def store_volume(v, path):
    """Write an AVOL pair ``<name>.json`` + ``<name>.raw``."""
    meta_path, raw_path = _avol_paths(path)
    if isinstance(v, LabelMap):
        payload, dtype = v.labels, "u32"
    else:
        payload, dtype = v.data, "f32"
    meta = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": dtype,
        "order": "x-fastest",
    }
    if isinstance(v, LabelMap):
        meta["registry"] = {str(k): name for k, name in sorted(v.registry.items())}
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload.astype(_AVOL_DTYPES[dtype]).ravel(order="F").tobytes())
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return meta_path


def load_volume(path):
    """Read an AVOL pair, or a single-file NIfTI-1 (``.nii``) for import."""
    path = Path(path)
    if path.suffix == ".nii":
        return load_nifti(path)
    meta_path, raw_path = _avol_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON header: {exc.msg}", exc.pos, meta_path) from None
    for key in ("dims", "spacing", "dtype"):
        if key not in meta:
            raise FormatError(f"header missing field {key!r}", 0, meta_path)
    if meta.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order {meta['order']!r}", 0, meta_path)
    dtype = _AVOL_DTYPES.get(meta["dtype"])
    if dtype is None:
        raise UnsupportedDtype(f"dtype {meta['dtype']!r} not supported", 0, meta_path)
    try:
        dims = _check_dims(meta["dims"])
        spacing = _check_spacing(meta["spacing"])
    except (InvalidVolume, TypeError, ValueError) as exc:
        raise FormatError(str(exc), 0, meta_path) from None
    raw = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, expected {expected}", len(raw), raw_path)
    flat = np.frombuffer(raw, dtype=dtype)
    arr = flat.reshape(dims, order="F")
    if meta["dtype"] == "u32":
        registry = {int(k): v for k, v in meta.get("registry", {}).items()}
        return LabelMap(arr.copy(), spacing, registry)
    if not np.all(np.isfinite(arr)):
        raise FormatError("payload contains non-finite values", 0, raw_path)
    return Volume3D(arr.copy(), spacing)


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def load_nifti(path):
    """Minimal single-file NIfTI-1 reader (uint8, int16, float32; uncompressed)."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 348:
        raise FormatError("file shorter than the 348-byte NIfTI-1 header", len(buf), path)
    for endian in "<>":
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise FormatError("sizeof_hdr is not 348", 0, path)
    if buf[344:348] != b"n+1\x00":
        raise FormatError(f"bad magic {buf[344:348]!r}; only single-file 'n+1' is supported", 344, path)
    dim = struct.unpack_from(endian + "8h", buf, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise FormatError(f"expected a 3-d volume, dim = {dim}", 40, path)
    dims = tuple(dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dimension in {dims}", 42, path)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype code {datatype} not supported", 70, path)
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    if vox_offset < 348:
        raise FormatError(f"vox_offset {vox_offset} inside header", 108, path)
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    n = dims[0] * dims[1] * dims[2]
    end = vox_offset + n * dtype.itemsize
    if len(buf) < end:
        raise FormatError(f"payload truncated: need {end} bytes, have {len(buf)}", len(buf), path)
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=vox_offset).astype(np.float64)
    if slope != 0 and (slope, inter) != (1.0, 0.0):
        arr = arr * slope + inter
    return Volume3D(arr.reshape(dims, order="F").astype(np.float32), spacing)
