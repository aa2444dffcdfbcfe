"""Prompt-augmented global initialization.

The scene splits into floor and surroundings. For every floor voxel we
count, per prompt word, the surrounding voxels (within a radius, floor
excluded) whose entry is cosine-similar to the word's encoding, and score
the voxel by the fraction of words with enough support. Particles are
seeded above the floor voxels that match every word.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .errors import MapStateError
from .features import encode_label
from .langmap import OctreeLanguageMap
from .mcl import ParticleSet

__all__ = [
    "PromptSpec",
    "FloorAlignment",
    "floor_voxels",
    "prompt_alignment",
    "seed_particles",
]


@dataclass(frozen=True)
class PromptSpec:
    """Open-set words plus the neighborhood matching parameters."""

    words: tuple[str, ...]
    radius: float = 2.0      # surrounding radius [m]
    rho: float = 0.9         # per-voxel cosine-similarity threshold
    min_count: int = 500     # voxels per word required for a match

    def __post_init__(self):
        if len(self.words) < 1:
            raise ValueError("prompt needs at least one word")
        if len(set(self.words)) != len(self.words):
            raise ValueError("prompt words must be pairwise distinct")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [-1, 1]")
        if self.min_count < 0:
            raise ValueError("min_count must be nonnegative")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass
class FloorAlignment:
    """Per-word surrounding counts and the match score of one floor voxel."""

    floor_voxel: tuple[int, int, int]
    counts: np.ndarray   # (m,) int
    score: float         # mean over words of [count >= min_count]


def floor_voxels(map_: OctreeLanguageMap, floor_feature: Optional[np.ndarray] = None,
                 floor_rho: float = 0.9, encoder_seed: Optional[int] = None) -> np.ndarray:
    """Grid coordinates of voxels whose entry reads as floor.

    In a grounded map carrying a literal "floor" label, exact index match
    is used; otherwise entries are compared against ``floor_feature`` (or
    the encoded word "floor" when an encoder seed is given instead).
    """
    if not map_.finalized:
        raise MapStateError("floor extraction requires a finalized map")
    db = map_.db
    li = db.label_index("floor")
    if li is not None:
        mask = map_.voxel_feature_indices == li
    else:
        if floor_feature is None:
            if encoder_seed is None:
                raise ValueError("need floor_feature or encoder_seed")
            floor_feature = encode_label("floor", encoder_seed, db.dim)
        sims = db.matrix @ (np.asarray(floor_feature, dtype=np.float64)
                            / np.linalg.norm(floor_feature))
        mask = sims[map_.voxel_feature_indices] > floor_rho
    return map_.voxel_coords[mask].copy()


def prompt_alignment(map_: OctreeLanguageMap, floor: np.ndarray, prompt: PromptSpec,
                     encoder_seed: int) -> list[FloorAlignment]:
    """Eq.-style neighborhood counts for every floor voxel.

    Surroundings are occupied non-floor voxels whose centers lie within
    the prompt radius of the floor voxel's center. Counting runs as one
    FFT convolution per word against a spherical kernel on the integer
    voxel lattice, which matches the brute-force definition exactly
    (counts are integers, rounded from the float transform). Results come
    back in lexicographic voxel-key order.
    """
    if not map_.finalized:
        raise MapStateError("prompt alignment requires a finalized map")
    floor = np.asarray(floor).reshape(-1, 3)
    if len(floor) == 0:
        raise ValueError("floor voxel set must be nonempty")
    db = map_.db
    words = prompt.words
    enc = np.stack([encode_label(w, encoder_seed, db.dim) for w in words])
    entry_match = (db.matrix @ enc.T) > prompt.rho       # (n_db, m)

    coords = map_.voxel_coords
    floor_keys = set(map(tuple, floor.tolist()))
    is_floor = np.fromiter((tuple(c) in floor_keys for c in coords.tolist()),
                           dtype=bool, count=len(coords))
    surround = coords[~is_floor]
    surround_match = entry_match[map_.voxel_feature_indices[~is_floor]]  # (S, m)

    r_cells = int(math.floor(prompt.radius / map_.resolution))
    span = np.arange(-r_cells, r_cells + 1)
    ox, oy, oz = np.meshgrid(span, span, span, indexing="ij")
    kernel = ((ox ** 2 + oy ** 2 + oz ** 2) * map_.resolution ** 2
              <= prompt.radius ** 2).astype(np.float64)

    lo = np.minimum(coords.min(axis=0), floor.min(axis=0))
    hi = np.maximum(coords.max(axis=0), floor.max(axis=0))
    shape = tuple(hi - lo + 1)
    order = np.lexsort((floor[:, 2], floor[:, 1], floor[:, 0]))
    floor_sorted = floor[order]
    fl = floor_sorted - lo

    counts = np.empty((len(floor_sorted), len(words)), dtype=np.int64)
    sloc = surround - lo
    for mi in range(len(words)):
        field = np.zeros(shape, dtype=np.float64)
        rows = surround_match[:, mi]
        if rows.any():
            np.add.at(field, (sloc[rows, 0], sloc[rows, 1], sloc[rows, 2]), 1.0)
            conv = signal.fftconvolve(field, kernel, mode="same")
            counts[:, mi] = np.rint(conv[fl[:, 0], fl[:, 1], fl[:, 2]]).astype(np.int64)
        else:
            counts[:, mi] = 0

    out = []
    for i, fv in enumerate(floor_sorted):
        score = float(np.mean(counts[i] >= prompt.min_count))
        out.append(FloorAlignment(tuple(int(c) for c in fv), counts[i].copy(), score))
    return out


def seed_particles(alignments: Sequence[FloorAlignment], n: int, height: float,
                   rng: np.random.Generator, resolution: float,
                   origin=(0.0, 0.0, 0.0)) -> tuple[ParticleSet, bool]:
    """Particles uniform over the floor voxels matching every prompt word.

    Positions sit ``height`` above the matched voxel centers with uniform
    yaw and uniform weights. When no voxel matches all words, seeding
    falls back to the best-scoring voxels and flags it.
    """
    if len(alignments) == 0:
        raise ValueError("alignments must be nonempty")
    if n < 1:
        raise ValueError("particle count must be >= 1")
    scores = np.array([a.score for a in alignments])
    support = np.flatnonzero(scores == 1.0)
    fallback = len(support) == 0
    if fallback:
        support = np.flatnonzero(scores == scores.max())
    voxels = np.array([alignments[i].floor_voxel for i in support])
    choice = rng.integers(0, len(support), n)
    centers = np.asarray(origin) + (voxels[choice] + 0.5) * resolution
    t = centers.copy()
    t[:, 2] += height
    yaw = rng.uniform(0.0, 2.0 * math.pi, n)
    q = np.zeros((n, 4))
    q[:, 2] = np.sin(0.5 * yaw)
    q[:, 3] = np.cos(0.5 * yaw)
    q[q[:, 3] < 0] *= -1.0
    return ParticleSet(t, q, np.full(n, 1.0 / n)), fallback
