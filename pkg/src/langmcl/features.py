"""Feature-vector algebra and the deduplicated feature database.

Features are unit-norm vectors in a shared text/image embedding space. A
FeatureDb keeps only vectors that are mutually separated by more than a
cosine-distance threshold; every other vector streamed into it is
associated with its cosine-closest entry. A deterministic synthetic label
encoder stands in for a real vision-language text encoder so that whole
pipelines can run and be verified without model weights.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "cosine_similarity",
    "cosine_distance",
    "encode_label",
    "FeatureDb",
    "FeatureDbBuilder",
    "build_feature_db",
    "nearest_feature",
    "ground_db",
]


def _as_feature(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"feature must be a 1-D vector, got shape {v.shape}")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two feature vectors, in [-1, 1]."""
    va, vb = _as_feature(a), _as_feature(b)
    if va.shape != vb.shape:
        raise ValueError(f"feature dimensions differ: {va.shape[0]} vs {vb.shape[0]}")
    na = math.sqrt(float(np.dot(va, va)))
    nb = math.sqrt(float(np.dot(vb, vb)))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm feature has no direction")
    s = float(np.dot(va, vb)) / (na * nb)
    return min(1.0, max(-1.0, s))


def cosine_distance(a, b) -> float:
    """1 - cosine_similarity(a, b), in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)


def encode_label(label: str, seed: int, dim: int = 512) -> np.ndarray:
    """Deterministic synthetic text feature for ``label``.

    The vector is ``dim`` independent standard-normal draws seeded by a
    stable hash of (label, seed), normalized to unit length. Identical
    inputs always produce the bitwise-identical vector, so a label list
    plus one integer fully determines a feature vocabulary. Distinct
    labels come out near-orthogonal at realistic dimensions.
    """
    if not label:
        raise ValueError("label must be nonempty")
    if dim < 2:
        raise ValueError(f"feature dimension must be >= 2, got {dim}")
    h = hashlib.blake2b(
        label.encode("utf-8"),
        digest_size=16,
        key=int(seed).to_bytes(8, "little", signed=True),
    )
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(h.digest(), "little")))
    v = rng.standard_normal(dim)
    n = np.linalg.norm(v)
    while n < 1e-12:  # keeps the contract total; unreachable in practice
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
    return v / n


class FeatureDb:
    """Ordered collection of mutually distinct unit features.

    Any two entries are separated by cosine distance strictly greater
    than ``tau``; entry order is insertion order and indices are stable.
    Entries are stored as float32 (the serialized precision) and exposed
    as float64 for math. Instances are immutable.
    """

    __slots__ = ("tau", "_entries32", "_entries64", "labels")

    def __init__(self, entries, tau: float, labels: Optional[Sequence[Optional[str]]] = None,
                 dim: Optional[int] = None, _skip_check: bool = False):
        if not 0.0 <= tau < 2.0:
            raise ValueError(f"tau must be in [0, 2), got {tau}")
        m = np.asarray(entries, dtype=np.float32)
        if m.size == 0:
            m = m.reshape(0, dim if dim is not None else 0)
        if m.ndim != 2:
            raise ValueError(f"entries must be a (n, F) matrix, got shape {m.shape}")
        self.tau = float(tau)
        self._entries32 = m
        self._entries64 = m.astype(np.float64)
        if labels is not None:
            labels = list(labels)
            if len(labels) != len(m):
                raise ValueError("labels length must match entry count")
        self.labels = labels
        if not _skip_check and len(m) > 1:
            norms = np.linalg.norm(self._entries64, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-5):
                raise ValueError("entries must be unit-norm")
            sims = self._entries64 @ self._entries64.T
            np.fill_diagonal(sims, -1.0)
            if np.any(1.0 - sims <= self.tau):
                raise ValueError("entries violate the pairwise cosine-distance threshold")

    def __len__(self) -> int:
        return len(self._entries32)

    @property
    def dim(self) -> int:
        return self._entries32.shape[1]

    @property
    def entries(self) -> np.ndarray:
        """(n, F) float32 entry matrix (read-only view)."""
        v = self._entries32.view()
        v.flags.writeable = False
        return v

    @property
    def matrix(self) -> np.ndarray:
        """(n, F) float64 upcast of the entries, for similarity math."""
        v = self._entries64.view()
        v.flags.writeable = False
        return v

    def entry(self, i: int) -> np.ndarray:
        return self._entries64[i].copy()

    def label_index(self, label: str) -> Optional[int]:
        if self.labels is None:
            return None
        try:
            return self.labels.index(label)
        except ValueError:
            return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDb):
            return NotImplemented
        return (
            self._entries32.shape == other._entries32.shape
            and np.array_equal(self._entries32, other._entries32)
            and self.labels == other.labels
        )

    def __repr__(self) -> str:
        return f"FeatureDb(n={len(self)}, dim={self.dim}, tau={self.tau})"


class FeatureDbBuilder:
    """Streaming greedy constructor for a FeatureDb.

    First-come entries win: a feature becomes a new entry iff its cosine
    distance to every existing entry exceeds tau, otherwise it is
    associated with the cosine-closest entry that exists at that moment.
    Accepted entries are quantized to float32 (the stored precision)
    before later candidates are compared against them.
    """

    def __init__(self, tau: float, dim: Optional[int] = None):
        if not 0.0 <= tau < 2.0:
            raise ValueError(f"tau must be in [0, 2), got {tau}")
        self.tau = float(tau)
        self._dim = dim
        self._cap = 16
        self._mat = None  # (cap, F) float64 of f32-quantized unit entries
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _ensure_dim(self, dim: int) -> None:
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise ValueError(f"feature dimensions differ: {dim} vs {self._dim}")
        if self._mat is None:
            self._mat = np.empty((self._cap, self._dim), dtype=np.float64)

    def _append(self, unit: np.ndarray) -> int:
        if self._n == self._cap:
            self._cap *= 2
            grown = np.empty((self._cap, self._dim), dtype=np.float64)
            grown[: self._n] = self._mat[: self._n]
            self._mat = grown
        self._mat[self._n] = unit
        self._n += 1
        return self._n - 1

    def add(self, feature) -> int:
        """Insert one feature; returns the entry index it maps to."""
        v = _as_feature(feature)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("zero-norm feature has no direction")
        # quantize before deciding, so stored pairwise distances are exactly
        # the distances the accept test saw
        unit = (v / n).astype(np.float32).astype(np.float64)
        self._ensure_dim(unit.shape[0])
        if self._n == 0:
            return self._append(unit)
        sims = self._mat[: self._n] @ unit
        best = int(np.argmax(sims))
        if 1.0 - sims[best] > self.tau:
            return self._append(unit)
        return best

    def add_many(self, features: np.ndarray) -> np.ndarray:
        """Insert a (n, F) batch in row order; returns per-row indices.

        Equivalent to calling add() row by row but vectorized: rows that
        cannot become new entries are assigned in bulk, and each accepted
        entry only costs one matvec against the remaining rows.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"expected a (n, F) matrix, got shape {feats.shape}")
        if len(feats) == 0:
            return np.zeros(0, dtype=np.int64)
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm feature has no direction")
        units = (feats / norms[:, None]).astype(np.float32).astype(np.float64)
        self._ensure_dim(units.shape[1])

        out = np.empty(len(units), dtype=np.int64)
        if self._n:
            sims = units @ self._mat[: self._n].T
            best_sim = sims.max(axis=1)
            best_idx = sims.argmax(axis=1).astype(np.int64)
        else:
            best_sim = np.full(len(units), -np.inf)
            best_idx = np.zeros(len(units), dtype=np.int64)

        start = 0
        while True:
            cand = np.flatnonzero(1.0 - best_sim[start:] > self.tau)
            if len(cand) == 0:
                out[start:] = best_idx[start:]
                break
            c = start + int(cand[0])
            out[start:c] = best_idx[start:c]
            new = self._append(units[c])
            out[c] = new
            start = c + 1
            if start == len(units):
                break
            # fold the fresh entry into the running best for later rows
            s_new = units[start:] @ self._mat[new]
            better = s_new > best_sim[start:]
            best_sim[start:] = np.where(better, s_new, best_sim[start:])
            best_idx[start:] = np.where(better, new, best_idx[start:])
        return out

    def finish(self, labels: Optional[Sequence[Optional[str]]] = None) -> FeatureDb:
        if self._mat is None:
            entries = np.zeros((0, self._dim if self._dim is not None else 0), dtype=np.float32)
        else:
            entries = self._mat[: self._n].astype(np.float32)
        return FeatureDb(entries, self.tau, labels=labels, dim=self._dim, _skip_check=True)


def build_feature_db(features: Iterable, tau: float, dim: Optional[int] = None) -> FeatureDb:
    """Greedy stream-order database construction (see FeatureDbBuilder)."""
    b = FeatureDbBuilder(tau, dim=dim)
    for f in features:
        b.add(f)
    return b.finish()


def nearest_feature(db: FeatureDb, feature) -> tuple[int, float]:
    """Index and similarity of the db entry cosine-closest to ``feature``.

    Ties break toward the lowest index.
    """
    if len(db) == 0:
        raise LookupError("feature database is empty")
    v = _as_feature(feature)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-norm feature has no direction")
    sims = db.matrix @ (v / n)
    idx = int(np.argmax(sims))
    return idx, min(1.0, max(-1.0, float(sims[idx])))


def ground_db(
    db: FeatureDb,
    prompt_labels: Sequence[str],
    encoder_seed: int,
    discard_threshold: float = 0.5,
) -> tuple[FeatureDb, list[Optional[int]]]:
    """Redefine a database from user-supplied class words.

    The grounded database holds one encoded entry per prompt label, with
    the labels attached. ``remap[i]`` is the grounded index closest (by
    cosine) to old entry ``i``, or None when even the closest one is
    farther than ``discard_threshold`` in cosine distance — callers drop
    the map voxels of discarded entries.
    """
    if len(prompt_labels) == 0:
        raise ValueError("prompt_labels must be nonempty")
    if len(set(prompt_labels)) != len(prompt_labels):
        raise ValueError("prompt_labels must be pairwise distinct")
    entries = np.stack([encode_label(w, encoder_seed, db.dim) for w in prompt_labels])
    grounded = FeatureDb(entries.astype(np.float32), db.tau, labels=list(prompt_labels))
    remap: list[Optional[int]] = []
    if len(db):
        sims = db.matrix @ grounded.matrix.T
        best = sims.argmax(axis=1)
        best_sim = sims[np.arange(len(db)), best]
        for i in range(len(db)):
            if 1.0 - best_sim[i] > discard_threshold:
                remap.append(None)
            else:
                remap.append(int(best[i]))
    return grounded, remap
