"""
Moving a region box from a reference scan to a new scan
=======================================================

A box drawn on a reference scan is carried to a target scan by matching the
global extents of the two brains: one scale factor per axis and a shift of
the centre.  Inside the carried box, a simple intensity threshold gives a
coarse segmentation.

Run with ``python3 demos/02_roi_transfer.py``.
"""

import numpy as np

from aga3d.roialign import (
    BoundingBox3D,
    coarse_mask_in_box,
    fit_transform,
    global_extent,
    invert_transform,
    transform_box,
)
from aga3d.volgrid import Volume3D

###############################################################################
# Two "brains": ellipsoids of different size and position.
def ellipsoid(dims, center, radii):
    idx = np.indices(dims, dtype=float)
    r = sum(((idx[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return r <= 1.0


ref = ellipsoid((48, 48, 32), (24, 24, 16), (18, 20, 12))
tgt = ellipsoid((64, 56, 40), (30, 30, 20), (24, 22, 15))
g_ref, g_tgt = global_extent(ref), global_extent(tgt)
print("reference extent", g_ref.to_dict())
print("target extent   ", g_tgt.to_dict())

###############################################################################
# A box around a structure on the reference, carried over.
box = BoundingBox3D(center=(30.0, 20.0, 14.0), sides=(8.0, 6.0, 4.0))
t = fit_transform(g_ref, g_tgt)
moved = transform_box(t, box)
print("per-axis scale", np.round(t.alpha, 4))
print("moved box", moved.to_dict())
print("volume ratio", moved.volume() / box.volume(), "= product of scales", np.prod(t.alpha))

###############################################################################
# Going back recovers the original box.
back = transform_box(invert_transform(t), moved)
print("round trip error", np.abs(np.subtract(back.center, box.center)).max())

###############################################################################
# Plant a bright spot in the target at the moved box centre and segment it.
rng = np.random.default_rng(0)
img = rng.normal(0.0, 0.2, tgt.shape) + tgt
c = np.round(moved.center).astype(int)
img[c[0] - 1:c[0] + 2, c[1] - 1:c[1] + 2, c[2] - 1:c[2] + 2] += 2.0
mask = coarse_mask_in_box(Volume3D(img), moved, quantile=0.9)
print("segmented voxels", int(mask.mask.sum()), "centroid", np.argwhere(mask.mask).mean(axis=0).round(1))
