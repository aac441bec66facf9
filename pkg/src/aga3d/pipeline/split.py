"""Patient-level train/validation/test partitioning."""

from __future__ import annotations

import numpy as np

from ..errors import SplitError

__all__ = ["split_counts", "patient_split"]


def split_counts(n, fractions):
    """Integer counts summing to ``n`` by largest remainder.

    Remainder ties go to the earlier split.  Every split with a positive
    fraction receives at least one item when ``n`` allows it; the shortfall
    is taken from the largest split.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    raw = fr * n
    counts = np.floor(raw).astype(int)
    order = sorted(range(fr.size), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    wanted = fr > 0
    if n >= wanted.sum():
        for i in np.flatnonzero(wanted & (counts == 0)):
            counts[int(np.argmax(counts))] -= 1
            counts[i] += 1
    return [int(c) for c in counts]


def patient_split(dataset, fractions=(0.70, 0.15, 0.15), seed=0, key=lambda s: s.patient_id):
    """Partition ``dataset`` so that no patient appears in two splits.

    Patients (sorted IDs) are permuted by ``seed`` and dealt into consecutive
    blocks sized by :func:`split_counts`.  Returns one list per fraction,
    preserving the dataset order inside each list.
    """
    patients = sorted({key(s) for s in dataset})
    if len(patients) < len(fractions):
        raise SplitError(f"need at least {len(fractions)} patients, got {len(patients)}")
    counts = split_counts(len(patients), fractions)
    perm = np.random.default_rng(seed).permutation(len(patients))
    assign = {}
    start = 0
    for split_idx, c in enumerate(counts):
        for j in perm[start:start + c]:
            assign[patients[j]] = split_idx
        start += c
    parts = [[] for _ in fractions]
    for s in dataset:
        parts[assign[key(s)]].append(s)
    return tuple(parts)

