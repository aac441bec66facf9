"""
Anatomy prior from a report phrase
==================================

A radiology phrase such as "left hippocampus" is matched against the region
names of a label map.  The top matches are turned into a soft spatial prior:
zero outside the selected regions, rising smoothly towards one with depth
inside them.  That prior becomes the second input channel of the classifier.

Run with ``python3 demos/01_prior_from_phrase.py``.
"""

import numpy as np

from aga3d.grounding import build_table_from_registry, ground_phrase
from aga3d.pipeline import PhantomSpec, generate_phantoms
from aga3d.prior import PriorParams, RegionMask, build_prior_channel, signed_distance_transform

###############################################################################
# A phantom patient supplies a label map with eight named regions.
scan = generate_phantoms(PhantomSpec(n_patients=1, scans_per_patient=(1, 1)))[0]
lm = scan.labels
print("regions:", lm.registry)
print("phrase on this scan:", scan.phrases[0])

###############################################################################
# Grounding: embed every region name and the phrase, rank by cosine similarity.
table = build_table_from_registry(lm, d=64)
g = ground_phrase(scan.phrases[0], table, k=3)
for label, score in g.ranked:
    print(f"  label {label:2d}  {lm.registry[label]:22s} score {score:.3f}")

###############################################################################
# The signed distance field is negative inside a region and positive outside.
label = g.label_ids[0]
field = signed_distance_transform(RegionMask.from_labels(lm, label))
print("deepest interior voxel is", -field.d.min(), "voxels from the boundary")

###############################################################################
# Fuse the per-region priors.  A larger sigma makes the prior rise more slowly.
for sigma in (1.0, 3.0, 6.0):
    prior = build_prior_channel(lm, g.label_ids, PriorParams(sigma=sigma))
    w = prior.data
    print(f"sigma={sigma:3.1f}: nonzero voxels {int((w > 0).sum()):5d}, "
          f"mean inside {w[w > 0].mean():.3f}, max {w.max():.3f}")

###############################################################################
# The prior never reaches one and is exactly zero outside the grounded regions.
outside = ~np.isin(lm.labels, g.label_ids)
assert not prior.data[outside].any() and prior.data.max() < 1.0
