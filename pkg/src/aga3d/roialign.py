"""Reference-to-target ROI box transfer and a box-constrained coarse segmenter.

Boxes are parameterized by center and side lengths in (float) voxel
coordinates.  The transfer is ``T(x) = c_tgt + diag(alpha) (x - c_ref)`` with
``alpha`` the per-axis ratio of target to reference global extents.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateExtent, EmptyRegion, EmptySegment, FormatError, OutOfBounds
from .prior import RegionMask
from .volgrid import LabelMap

__all__ = [
    "BoundingBox3D",
    "GlobalExtent",
    "BoxTransform",
    "global_extent",
    "fit_transform",
    "transform_point",
    "transform_box",
    "invert_transform",
    "coarse_mask_in_box",
    "load_box",
    "store_box",
    "load_extent",
]

DEFAULT_QUANTILE = 0.75


def _vec3(v, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be three finite numbers, got {v!r}")
    return arr


@dataclass(frozen=True)
class BoundingBox3D:
    center: tuple
    sides: tuple

    _allow_flat = False

    def __post_init__(self):
        c = _vec3(self.center, "center")
        s = _vec3(self.sides, "sides")
        if np.any(s < 0) or (not self._allow_flat and np.any(s == 0)):
            raise ValueError(f"box sides must be positive, got {tuple(s)}")
        object.__setattr__(self, "center", tuple(c.tolist()))
        object.__setattr__(self, "sides", tuple(s.tolist()))

    @property
    def lo(self):
        return np.asarray(self.center) - np.asarray(self.sides) / 2

    @property
    def hi(self):
        return np.asarray(self.center) + np.asarray(self.sides) / 2

    def corners(self):
        c, h = np.asarray(self.center), np.asarray(self.sides) / 2
        return np.array([c + np.array(signs) * h for signs in itertools.product((-1, 1), repeat=3)])

    def volume(self):
        return float(np.prod(self.sides))

    def to_dict(self):
        return {"center": list(self.center), "sides": list(self.sides)}


@dataclass(frozen=True)
class GlobalExtent(BoundingBox3D):
    """Global (whole-brain) bounding extent; same geometry as a box.

    A flat extent (a zero side) can be represented so that fitting a
    transform to it reports :class:`DegenerateExtent` rather than a parse
    error.
    """

    _allow_flat = True


@dataclass(frozen=True)
class BoxTransform:
    alpha: tuple
    c_ref: tuple
    c_tgt: tuple

    def __post_init__(self):
        a = _vec3(self.alpha, "alpha")
        if np.any(a <= 0):
            raise DegenerateExtent(f"scaling factors must be positive, got {tuple(a)}")
        object.__setattr__(self, "alpha", tuple(a.tolist()))
        object.__setattr__(self, "c_ref", tuple(_vec3(self.c_ref, "c_ref").tolist()))
        object.__setattr__(self, "c_tgt", tuple(_vec3(self.c_tgt, "c_tgt").tolist()))

    @property
    def matrix(self):
        return np.diag(self.alpha)

    def to_dict(self):
        return {"alpha": list(self.alpha), "c_ref": list(self.c_ref), "c_tgt": list(self.c_tgt)}


def global_extent(region):
    """Tightest box over foreground voxel centers, grown by half a voxel per face."""
    if isinstance(region, LabelMap):
        fg = region.foreground()
    elif isinstance(region, RegionMask):
        fg = region.mask
    else:
        fg = np.asarray(region, dtype=bool)
    if not fg.any():
        raise EmptyRegion("no foreground voxels")
    idx = np.nonzero(fg)
    lo = np.array([a.min() for a in idx], dtype=np.float64) - 0.5
    hi = np.array([a.max() for a in idx], dtype=np.float64) + 0.5
    return GlobalExtent(tuple((lo + hi) / 2), tuple(hi - lo))


def fit_transform(g_ref, g_tgt):
    ref = np.asarray(g_ref.sides)
    if np.any(ref <= 0):
        raise DegenerateExtent(f"reference extent has a non-positive side: {tuple(ref)}")
    return BoxTransform(tuple(np.asarray(g_tgt.sides) / ref), g_ref.center, g_tgt.center)


def transform_point(t, x):
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(t.c_tgt) + np.asarray(t.alpha) * (x - np.asarray(t.c_ref))


def transform_box(t, b):
    """Image of ``b`` under ``t``: center ``T(c)``, sides ``alpha * s``."""
    return BoundingBox3D(tuple(transform_point(t, b.center)),
                         tuple(np.asarray(t.alpha) * np.asarray(b.sides)))


def invert_transform(t):
    return BoxTransform(tuple(1.0 / np.asarray(t.alpha)), t.c_tgt, t.c_ref)


def _box_voxels(b, dims):
    """Boolean grid of voxels whose centers fall inside ``b`` (closed box)."""
    lo, hi = b.lo, b.hi
    axes = []
    for axis, n in enumerate(dims):
        centers = np.arange(n, dtype=np.float64)
        axes.append((centers >= lo[axis]) & (centers <= hi[axis]))
    return axes[0][:, None, None] & axes[1][None, :, None] & axes[2][None, None, :]


def coarse_mask_in_box(v, b, quantile=DEFAULT_QUANTILE):
    """Deterministic stand-in for a box-prompted segmenter.

    Selects in-box voxels whose intensity is at or above the in-box
    ``quantile`` (ties at the threshold are included).
    """
    if not 0 < quantile < 1:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    inside = _box_voxels(b, v.dims)
    if not inside.any():
        raise OutOfBounds(f"box {b.to_dict()} does not intersect grid {v.dims}")
    vals = v.data[inside]
    thresh = np.quantile(vals, quantile, method="inverted_cdf")
    mask = inside & (v.data >= thresh)
    if not mask.any():
        warnings.warn("box-constrained segmentation is empty", EmptySegment, stacklevel=2)
    return RegionMask(mask, v.spacing)


def _read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, path) from None


def load_box(path, cls=BoundingBox3D):
    doc = _read_json(path)
    try:
        return cls(tuple(doc["center"]), tuple(doc["sides"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad box document: {exc}", 0, path) from None


def load_extent(path):
    return load_box(path, GlobalExtent)


def store_box(b, path):
    Path(path).write_text(json.dumps(b.to_dict()) + "\n")
