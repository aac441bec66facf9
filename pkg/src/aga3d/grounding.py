"""Phrase grounding: rank atlas labels by cosine similarity to a phrase embedding."""

from __future__ import annotations

import math
import re
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyPhrase, FormatError, TruncatedTopK, ZeroVector

__all__ = [
    "EmbeddingTable",
    "PhraseQuery",
    "Grounding",
    "normalize_text",
    "toy_embed",
    "cosine_similarity",
    "top_k",
    "ground_phrase",
    "load_embedding_table",
    "store_embedding_table",
    "build_table_from_registry",
    "read_phrases",
]

DEFAULT_K = 5
TIE_TOL = 1e-12


@dataclass(frozen=True)
class EmbeddingTable:
    label_ids: tuple
    names: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        ids = tuple(int(i) for i in self.label_ids)
        if vecs.ndim != 2 or vecs.shape[0] != len(ids) or len(self.names) != len(ids):
            raise FormatError("table rows, names and vectors must align")
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate label id in embedding table")
        if not np.all(np.isfinite(vecs)):
            raise FormatError("non-finite embedding entry")
        if np.any(np.linalg.norm(vecs, axis=1) == 0):
            raise ZeroVector("embedding table contains a zero vector")
        vecs.flags.writeable = False
        object.__setattr__(self, "label_ids", ids)
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.label_ids)


@dataclass(frozen=True)
class PhraseQuery:
    phrase: str
    vector: np.ndarray


@dataclass(frozen=True)
class Grounding:
    phrase: str
    ranked: tuple  # ((label_id, score), ...)

    @property
    def label_ids(self):
        return [lid for lid, _ in self.ranked]

    def to_dict(self):
        return {"phrase": self.phrase,
                "matches": [{"label": lid, "score": score} for lid, score in self.ranked]}


def normalize_text(text):
    return re.sub(r"\s+", " ", text.strip().lower())


def toy_embed(text, d=64):
    """Deterministic offline phrase embedding.

    Character trigrams of the normalized text (padded with one space on each
    side) are hashed with CRC-32 into ``d`` buckets; the count vector is
    L2-normalized.
    """
    if d < 8:
        raise ValueError(f"embedding dim must be >= 8, got {d}")
    norm = normalize_text(text)
    if not norm:
        raise EmptyPhrase("phrase is empty after normalization")
    padded = f" {norm} "
    vec = np.zeros(d)
    for i in range(len(padded) - 2):
        vec[zlib.crc32(padded[i:i + 3].encode("utf-8")) % d] += 1.0
    return vec / np.linalg.norm(vec)


def cosine_similarity(q, e):
    q = np.asarray(q, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    nq, ne = np.linalg.norm(q), np.linalg.norm(e)
    if nq == 0 or ne == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(q @ e / (nq * ne), -1.0, 1.0))


def _similarities(q, table):
    q = np.asarray(q, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ZeroVector("query vector has zero norm")
    if q.shape != (table.dim,):
        raise FormatError(f"query dim {q.shape} does not match table dim {table.dim}")
    norms = np.linalg.norm(table.vectors, axis=1)
    return np.clip(table.vectors @ q / (norms * nq), -1.0, 1.0)


def top_k(q, table, k=DEFAULT_K):
    """Top-``k`` labels by cosine similarity, ties broken by ascending label id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(table) == 0:
        raise ValueError("embedding table is empty")
    phrase = q.phrase if isinstance(q, PhraseQuery) else ""
    vec = q.vector if isinstance(q, PhraseQuery) else q
    if k > len(table):
        warnings.warn(f"k={k} exceeds table size {len(table)}; truncating", TruncatedTopK, stacklevel=2)
    scores = _similarities(vec, table)
    ids = np.asarray(table.label_ids)
    order, tied = _rank(scores, ids)
    n = min(k, len(table))
    return Grounding(phrase, tuple((int(ids[i]), float(t)) for i, t in zip(order[:n], tied[:n])))


def _rank(scores, ids, tie_tol=TIE_TOL):
    """Indices by descending score; scores within ``tie_tol`` count as tied.

    Returns ``(order, tied_scores)`` where every member of a tie group
    reports the group's highest score, so the output stays sorted.
    """
    order = np.lexsort((ids, -scores))
    s = scores[order]
    # chain consecutive near-equal scores into one tie group
    group = np.concatenate([[0], np.cumsum(np.diff(s) < -tie_tol)])
    head = s[np.searchsorted(group, group)]
    final = np.lexsort((ids[order], group))
    return order[final], head[final]


def ground_phrase(phrase, table, k=DEFAULT_K):
    """Embed ``phrase`` with :func:`toy_embed` and ground it against ``table``."""
    query = PhraseQuery(phrase, toy_embed(phrase, table.dim))
    return top_k(query, table, k)


def build_table_from_registry(lm_or_registry, d=64):
    registry = getattr(lm_or_registry, "registry", lm_or_registry)
    ids = sorted(registry)
    return EmbeddingTable(tuple(ids), tuple(registry[i] for i in ids),
                          np.stack([toy_embed(registry[i], d) for i in ids]))


def store_embedding_table(table, path):
    lines = [f"#dim={table.dim}"]
    for lid, name, vec in zip(table.label_ids, table.names, table.vectors):
        lines.append(f"{lid}\t{name}\t" + ",".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embedding_table(path):
    """Parse the tab-separated table format; errors name the offending row."""
    path = Path(path)
    rows = path.read_text(encoding="utf-8").splitlines()
    if not rows or not rows[0].startswith("#dim="):
        raise FormatError("missing '#dim=d' header line", 1, path)
    try:
        dim = int(rows[0][5:])
    except ValueError:
        raise FormatError(f"bad dimension header {rows[0]!r}", 1, path) from None
    ids, names, vecs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        parts = row.split("\t")
        if len(parts) != 3:
            raise FormatError(f"row {lineno}: expected 3 tab-separated fields", lineno, path)
        try:
            lid = int(parts[0])
            vec = [float(x) for x in parts[2].split(",")]
        except ValueError:
            raise FormatError(f"row {lineno}: unparsable id or vector", lineno, path) from None
        if len(vec) != dim:
            raise FormatError(f"row {lineno}: vector length {len(vec)} != dim {dim}", lineno, path)
        if not all(math.isfinite(x) for x in vec):
            raise FormatError(f"row {lineno}: non-finite vector entry", lineno, path)
        if lid in ids:
            raise FormatError(f"row {lineno}: duplicate label id {lid}", lineno, path)
        ids.append(lid)
        names.append(parts[1])
        vecs.append(vec)
    if not ids:
        raise FormatError("table has no rows", 2, path)
    return EmbeddingTable(tuple(ids), tuple(names), np.asarray(vecs, dtype=np.float64))


def read_phrases(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip()]
