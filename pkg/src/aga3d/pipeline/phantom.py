"""Synthetic phantom cohort: atlas regions, implanted lesions, phrases.

Every scan carries one phrase naming a lesion-prone region.  The phrase is
drawn independently of the class, so it carries no label information on its
own.  Positive scans hold a hyperintense blob strictly inside the named
region.  Negative scans hold either nothing or a distractor blob of the same
contrast in a region that the phrase does not ground to.  Distractors are
spread over the same regions as true lesions, so telling them apart needs
the phrase-derived prior.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..errors import FormatError, PlacementError
from ..grounding import build_table_from_registry, ground_phrase
from ..volgrid import LabelMap, Volume3D, load_volume, store_volume

__all__ = [
    "REGION_NAMES",
    "PhantomSpec",
    "Region",
    "PhantomScan",
    "generate_phantoms",
    "store_phantoms",
    "load_phantoms",
]

# The first eight names are chosen so that, under the toy embedder with K = 5,
# every phrase leaves exactly three regions outside its grounding and every
# region is left out by exactly three phrases.
REGION_NAMES = (
    "right thalamus",
    "right lingual",
    "left amygdala",
    "left postcentral",
    "right accumbens area",
    "right putamen",
    "left entorhinal",
    "left frontal pole",
    "left hippocampus",
    "brainstem",
    "corpus callosum",
    "left caudate",
)

BOX_SCALE = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 32)
    n_regions: int = 8
    n_lesion_prone: int = 8
    lesion_delta: float = 1.0
    lesion_radius: tuple = (2.0, 3.0)
    positive_prob: float = 0.5
    distractor_prob: float = 0.5
    noise_std: float = 0.15
    n_patients: int = 150
    scans_per_patient: tuple = (1, 2)
    region_radius: tuple = (5.0, 6.5)
    anatomy_jitter: int = 2
    ground_k: int = 5
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "lesion_radius", "scans_per_patient", "region_radius"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be three sizes >= 8, got {self.dims}")
        if not 1 <= self.n_regions <= len(REGION_NAMES):
            raise ValueError(f"n_regions must lie in [1, {len(REGION_NAMES)}]")
        if not 1 <= self.n_lesion_prone <= self.n_regions:
            raise ValueError("n_lesion_prone must lie in [1, n_regions]")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius}")
        rlo, rhi = self.region_radius
        if not (hi + 1.0 <= BOX_SCALE * rlo and rlo <= rhi):
            raise ValueError("regions must be large enough to hold a lesion with a one-voxel margin")
        smin, smax = self.scans_per_patient
        if not 1 <= smin <= smax:
            raise ValueError(f"invalid scans-per-patient range {self.scans_per_patient}")
        for name in ("positive_prob", "distractor_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_std < 0 or self.lesion_delta < 0 or self.n_patients < 1:
            raise ValueError("noise_std, lesion_delta must be >= 0 and n_patients >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Region:
    label: int
    name: str
    shape: str  # "sphere" or "box"
    center: tuple
    radius: float  # sphere radius, or half side of the cube

    def contains(self, pts):
        d = np.asarray(pts, dtype=np.float64) - np.asarray(self.center)
        if self.shape == "sphere":
            return np.sqrt((d * d).sum(axis=-1)) <= self.radius
        return np.all(np.abs(d) <= self.radius, axis=-1)


@dataclass
class PhantomScan:
    scan_id: str
    patient_id: str
    volume: Volume3D
    labels: LabelMap
    phrases: tuple
    label: int
    blob: dict | None = None  # {"center", "radius", "region"} of the implanted blob
    meta: dict = field(default_factory=dict)


def _grid_points(dims):
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), axis=-1)


def _gap(a, b):
    """Euclidean clearance between two regions (negative when they overlap)."""
    d = np.abs(np.asarray(a.center) - np.asarray(b.center))
    if a.shape == "sphere" and b.shape == "sphere":
        return float(np.linalg.norm(d)) - a.radius - b.radius
    if a.shape == "box" and b.shape == "box":
        return float(np.linalg.norm(np.maximum(d - a.radius - b.radius, 0.0)))
    sph, box = (a, b) if a.shape == "sphere" else (b, a)
    return float(np.linalg.norm(np.maximum(d - box.radius, 0.0))) - sph.radius


def _place_once(spec, rng, max_tries):
    dims = np.asarray(spec.dims, dtype=np.float64)
    min_gap = 2 * spec.anatomy_jitter + 2
    regions = []
    for idx in range(spec.n_regions):
        shape = "sphere" if idx % 2 == 0 else "box"
        for _ in range(max_tries):
            radius = float(rng.uniform(*spec.region_radius))
            if shape == "box":
                radius *= BOX_SCALE
            margin = radius + spec.anatomy_jitter + 1
            lo, hi = np.full(3, margin), dims - 1 - margin
            if np.any(hi < lo):
                continue
            cand = Region(idx + 1, REGION_NAMES[idx], shape, tuple(rng.uniform(lo, hi)), radius)
            if all(_gap(cand, r) >= min_gap for r in regions):
                regions.append(cand)
                break
        else:
            return None, idx
    return regions, None


def _place_template(spec, rng, restarts=50, max_tries=500):
    """Non-overlapping spheres and cubes that keep clear of the volume faces.

    Cubes use a half side of ``BOX_SCALE`` times the drawn radius, which
    roughly matches the volume of the sphere the radius would give.  Random
    sequential placement is restarted from scratch when it paints itself
    into a corner.
    """
    failed = 0
    for _ in range(restarts):
        regions, failed = _place_once(spec, rng, max_tries)
        if regions is not None:
            return regions
    raise PlacementError(f"could not place region {failed + 1} ({REGION_NAMES[failed]}) "
                         f"without overlap in {spec.dims} after {restarts} restarts")


def _jitter(regions, spec, rng):
    j = spec.anatomy_jitter
    out = []
    for r in regions:
        shift = rng.integers(-j, j + 1, size=3) if j else np.zeros(3)
        out.append(Region(r.label, r.name, r.shape, tuple(np.asarray(r.center) + shift), r.radius))
    return out


def _region_mask(r, pts):
    """``r.contains`` over the grid, evaluated only inside the region's bounding box."""
    dims = pts.shape[:3]
    c = np.asarray(r.center)
    lo = np.clip(np.floor(c - r.radius).astype(int), 0, dims)
    hi = np.clip(np.ceil(c + r.radius).astype(int) + 1, 0, dims)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    out = np.zeros(dims, dtype=bool)
    out[box] = r.contains(pts[box])
    return out


def _label_map(regions, pts, dims):
    labels = np.zeros(dims, dtype=np.uint32)
    for r in regions:
        inside = _region_mask(r, pts)
        if np.any(labels[inside]):
            raise PlacementError(f"region {r.name} overlaps another region")
        labels[inside] = r.label
    if any(not np.any(labels == r.label) for r in regions):
        raise PlacementError("a region has no voxels on the grid")
    return LabelMap(labels, registry={r.label: r.name for r in regions})


def _anatomy(regions, lm, pts, dims, rng):
    """Noise-free intensity template: brain ellipsoid plus region contrasts."""
    c = (np.asarray(dims) - 1) / 2.0
    rel = (pts - c) / (np.asarray(dims) / 2.0 - 0.5)
    base = np.where((rel ** 2).sum(axis=-1) <= 1.0, 0.5, 0.0)
    for r in regions:
        base[lm.labels == r.label] = 0.5 + rng.uniform(-0.2, 0.2)
    return base


def _blob_site(region, radius, rng):
    """Center so the blob sphere stays at least one voxel inside ``region``."""
    room = region.radius - radius - 1.0
    c = np.asarray(region.center)
    if region.shape == "sphere":
        while True:
            d = rng.uniform(-room, room, size=3)
            if np.linalg.norm(d) <= room:
                return c + d
    return c + rng.uniform(-room, room, size=3)


def _distractor_map(regions, spec, rng):
    """Phrase label -> distractor region label, a bijection on the lesion-prone set.

    Each phrase is paired with a region outside its own top-K grounding.
    Because the pairing is one-to-one, distractor blobs land in every
    lesion-prone region as often as true lesions do, so blob location alone
    says nothing about the class.
    """
    prone = regions[:spec.n_lesion_prone]
    registry = {r.label: r.name for r in regions}
    table = build_table_from_registry(registry, d=spec.embed_dim)
    k = min(spec.ground_k, len(regions))
    grounded = {r.label: set(ground_phrase(r.name, table, k).label_ids) for r in prone}
    allowed = np.array([[b.label not in grounded[p.label] for b in prone] for p in prone])
    cost = np.where(allowed, rng.random(allowed.shape), 1e6)
    rows, cols = linear_sum_assignment(cost)
    if not allowed[rows, cols].all():
        raise PlacementError(f"cannot pair every phrase with a distractor region outside its "
                             f"top-{k} grounding; use more lesion-prone regions or a smaller K")
    return {prone[r].label: prone[c].label for r, c in zip(rows, cols)}


def generate_phantoms(spec: PhantomSpec):
    """Deterministic list of :class:`PhantomScan` for ``spec``."""
    template = _place_template(spec, np.random.default_rng([spec.seed, 0]))
    pts = _grid_points(spec.dims)
    prone = template[:spec.n_lesion_prone]
    distractor = _distractor_map(template, spec, np.random.default_rng([spec.seed, 2])) \
        if spec.distractor_prob > 0 else {}
    scans = []
    for p in range(spec.n_patients):
        rng = np.random.default_rng([spec.seed, 1, p])
        regions = _jitter(template, spec, rng)
        lm = _label_map(regions, pts, spec.dims)
        anatomy = _anatomy(regions, lm, pts, spec.dims, rng)
        by_label = {r.label: r for r in regions}
        n_scans = int(rng.integers(spec.scans_per_patient[0], spec.scans_per_patient[1] + 1))
        for s in range(n_scans):
            named = prone[int(rng.integers(len(prone)))]
            positive = bool(rng.random() < spec.positive_prob)
            radius = float(rng.uniform(*spec.lesion_radius))
            blob_region = None
            if positive:
                blob_region = by_label[named.label]
            elif rng.random() < spec.distractor_prob:
                blob_region = by_label[distractor[named.label]]
            data = anatomy.copy()
            blob = None
            if blob_region is not None:
                centre = _blob_site(blob_region, radius, rng)
                inside = np.sqrt(((pts - centre) ** 2).sum(axis=-1)) <= radius
                data[inside] += spec.lesion_delta
                blob = {"center": [float(v) for v in centre], "radius": radius,
                        "region": blob_region.label}
            data += rng.normal(0.0, spec.noise_std, size=spec.dims) if spec.noise_std else 0.0
            scans.append(PhantomScan(
                scan_id=f"p{p:04d}_s{s}",
                patient_id=f"p{p:04d}",
                volume=Volume3D(data.astype(np.float32)),
                labels=lm,
                phrases=(named.name,),
                label=int(positive),
                blob=blob,
            ))
    return scans


def store_phantoms(scans, out_dir):
    """Write volumes and per-patient label maps as AVOL plus ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    written = set()
    for sc in scans:
        lab_name = f"{sc.patient_id}_labels"
        if sc.patient_id not in written:
            store_volume(sc.labels, out / lab_name)
            written.add(sc.patient_id)
        store_volume(sc.volume, out / sc.scan_id)
        index.append({"scan_id": sc.scan_id, "patient_id": sc.patient_id, "label": sc.label,
                      "phrases": list(sc.phrases), "volume": sc.scan_id, "labels": lab_name,
                      "blob": sc.blob})
    (out / "index.json").write_text(json.dumps({"scans": index}, indent=1, sort_keys=True))
    return out / "index.json"


def load_phantoms(out_dir):
    root = Path(out_dir)
    path = root / "index.json"
    try:
        index = json.loads(path.read_text())["scans"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read dataset index: {exc}", 0, str(path)) from None
    label_cache = {}
    scans = []
    for row in index:
        if row["labels"] not in label_cache:
            label_cache[row["labels"]] = load_volume(root / row["labels"])
        scans.append(PhantomScan(row["scan_id"], row["patient_id"], load_volume(root / row["volume"]),
                                 label_cache[row["labels"]], tuple(row["phrases"]), int(row["label"]),
                                 row.get("blob")))
    return scans
