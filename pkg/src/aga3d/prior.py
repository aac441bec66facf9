"""Region masks to center-emphasizing prior volumes.

A region's signed distance field is negative inside, zero on its discrete
boundary and positive outside; the prior weight is
``W = 1 - exp(-d_in**2 / (2 sigma**2))`` with ``d_in = max(0, -D)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegion, MissingRegion, ShapeError, UnknownLabel
from .volgrid import Volume3D

__all__ = [
    "RegionMask",
    "DistanceField",
    "PriorParams",
    "boundary_voxels",
    "signed_distance_transform",
    "prior_weights",
    "gaussian_prior",
    "fuse_region_priors",
    "build_prior_channel",
]

_BELOW_ONE = np.nextafter(np.float32(1), np.float32(0))


@dataclass(frozen=True)
class RegionMask:
    mask: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    source_label: int = 0

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 3:
            raise ShapeError(f"region mask must be 3-d, got shape {m.shape}")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.mask.shape

    @classmethod
    def from_labels(cls, lm, label_id):
        return cls(lm.mask(label_id), lm.spacing, int(label_id))


@dataclass(frozen=True)
class DistanceField:
    """Signed distances in voxel units (float64)."""

    d: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.d.shape

    def inside_depth(self):
        return np.maximum(0.0, -self.d)


@dataclass(frozen=True)
class PriorParams:
    sigma: float = 3.0
    fusion: str = "max"
    anisotropic: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.fusion not in ("max", "sum-clamped"):
            raise ValueError(f"unknown fusion rule {self.fusion!r}")


def _as_mask(m):
    return m.mask if isinstance(m, RegionMask) else np.asarray(m, dtype=bool)


def boundary_voxels(m):
    """Boolean grid of the voxels of ``m`` with a 6-neighbor outside ``m``.

    Voxels on the faces of the grid always count as boundary.
    """
    mask = _as_mask(m)
    if not mask.any():
        raise EmptyRegion("boundary of an empty mask")
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[core]
    return mask & ~interior


def _axis_weights(spacing, anisotropic):
    if not anisotropic:
        return (1.0, 1.0, 1.0)
    s = np.asarray(spacing, dtype=float)
    return tuple(s / s.min())


def _min_plus_pass(f, axis, weight, chunk_elems=1 << 22):
    """Exact 1-d squared-distance pass: ``g[i] = min_j f[j] + (w (i - j))**2``."""
    f = np.moveaxis(f, axis, -1)
    shape = f.shape
    n = shape[-1]
    lines = f.reshape(-1, n)
    idx = np.arange(n, dtype=np.float64)
    d2 = (weight * (idx[:, None] - idx[None, :])) ** 2
    out = np.empty_like(lines)
    step = max(1, chunk_elems // (n * n))
    for start in range(0, lines.shape[0], step):
        block = lines[start:start + step]
        out[start:start + step] = (block[:, None, :] + d2[None]).min(axis=-1)
    return np.moveaxis(out.reshape(shape), -1, axis)


def _squared_edt(features, weights):
    """Squared Euclidean distance from each voxel to the nearest ``True`` voxel."""
    f = np.where(features, 0.0, np.inf)
    for axis in range(3):
        f = _min_plus_pass(f, axis, weights[axis])
    return f


def signed_distance_transform(m, anisotropic=True):
    """Exact signed Euclidean distance to the discrete boundary of ``m``.

    Negative inside the region, zero on boundary voxels, positive outside.
    Distances are in voxel units; with ``anisotropic`` the per-axis offsets are
    scaled by ``spacing / min(spacing)``.
    """
    mask = _as_mask(m)
    spacing = m.spacing if isinstance(m, RegionMask) else (1.0, 1.0, 1.0)
    edge = boundary_voxels(mask)
    dist = np.sqrt(_squared_edt(edge, _axis_weights(spacing, anisotropic)))
    return DistanceField(np.where(mask, -dist, dist), spacing)


def prior_weights(d_in, sigma):
    """Elementwise ``1 - exp(-d_in**2 / (2 sigma**2))`` in float64."""
    d_in = np.asarray(d_in, dtype=np.float64)
    return -np.expm1(-(d_in * d_in) / (2.0 * float(sigma) ** 2))


def gaussian_prior(dfield, params):
    w = prior_weights(dfield.inside_depth(), params.sigma)
    return Volume3D(np.minimum(w.astype(np.float32), _BELOW_ONE), dfield.spacing)


def fuse_region_priors(priors, params):
    """Combine per-region priors voxelwise (``max`` or ``sum-clamped``)."""
    priors = list(priors)
    if not priors:
        raise ValueError("need at least one prior to fuse")
    dims = priors[0].dims
    for p in priors[1:]:
        if p.dims != dims:
            raise ShapeError(f"prior dims {p.dims} do not match {dims}")
    stack = np.stack([p.data for p in priors])
    if params.fusion == "max":
        out = stack.max(axis=0)
    else:
        out = np.clip(stack.astype(np.float64).sum(axis=0), 0.0, 1.0)
    return Volume3D(out.astype(np.float32), priors[0].spacing)


def _region_weights(mask, spacing, params):
    """Prior weights for one region, computed on its bounding box.

    Boundary voxels lie inside the mask, so the nearest one to any interior
    voxel is inside the mask's bounding box and cropping is exact.
    """
    edge = boundary_voxels(mask)
    nz = np.nonzero(mask)
    box = tuple(slice(int(a.min()), int(a.max()) + 1) for a in nz)
    dist = np.sqrt(_squared_edt(edge[box], _axis_weights(spacing, params.anisotropic)))
    d_in = np.where(mask[box], dist, 0.0)
    out = np.zeros(mask.shape)
    out[box] = prior_weights(d_in, params.sigma)
    return out


def build_prior_channel(lm, selected_labels, params=PriorParams()):
    """Fused prior over the regions of ``selected_labels`` in label map ``lm``."""
    selected = [int(s) for s in selected_labels]
    unknown = [s for s in selected if s not in lm.registry]
    if unknown:
        raise UnknownLabel(f"labels {unknown} are not in the registry")
    if not selected:
        return Volume3D(np.zeros(lm.dims, dtype=np.float32), lm.spacing)
    priors = []
    for label in dict.fromkeys(selected):
        mask = lm.mask(label)
        if not mask.any():
            warnings.warn(f"label {label} ({lm.registry[label]}) has no voxels", MissingRegion, stacklevel=2)
            priors.append(Volume3D(np.zeros(lm.dims, dtype=np.float32), lm.spacing))
            continue
        w = _region_weights(mask, lm.spacing, params)
        priors.append(Volume3D(np.minimum(w.astype(np.float32), _BELOW_ONE), lm.spacing))
    return fuse_region_priors(priors, params)
