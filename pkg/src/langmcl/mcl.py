"""Particle filter: initialization, prediction, ray-similarity weighting,
resampling, and pose estimation.

Particle weighting follows the averaged-cosine measurement model: each
particle traces the shared observation rays in its own frame, and its
likelihood is the mean cosine similarity between the per-ray image
features and the map entries those rays hit (misses contribute zero).
Weighting is pure and runs chunked over a worker pool; results are
bitwise independent of the worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import MapStateError
from .features import FeatureDb
from .geometry import (CameraIntrinsics, Pose, _sample_perturbations, pixel_rays,
                       quat_canonical, quat_multiply, quat_rotation_matrix,
                       yaw_quaternion)
from .langmap import OctreeLanguageMap

__all__ = [
    "ParticleSet",
    "ObservationSample",
    "MclConfig",
    "StepDiagnostics",
    "init_gaussian",
    "init_uniform",
    "init_from_poses",
    "predict",
    "build_sampling_masks",
    "uniform_image_sample",
    "weigh",
    "resample",
    "effective_sample_size",
    "estimate_pose",
    "step",
]

_RAY_CHUNK = 1 << 18


@dataclass
class ParticleSet:
    """Pose hypotheses with normalized importance weights."""

    translations: np.ndarray  # (n, 3)
    rotations: np.ndarray     # (n, 4) unit quaternions, scalar part >= 0
    weights: np.ndarray       # (n,) nonnegative, sums to 1
    planar: bool = False
    fixed_height: float = 0.0

    def __post_init__(self):
        self.translations = np.asarray(self.translations, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.translations)
        if n == 0:
            raise ValueError("particle set must be nonempty")
        if self.translations.shape != (n, 3) or self.rotations.shape != (n, 4):
            raise ValueError("translations must be (n, 3) and rotations (n, 4)")
        if self.weights.shape != (n,):
            raise ValueError("weights must be (n,)")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @property
    def n(self) -> int:
        return len(self.translations)

    def pose(self, i: int) -> Pose:
        return Pose(self.translations[i], self.rotations[i])


@dataclass
class ObservationSample:
    """Shared per-frame ray sample traced by every particle."""

    pixels: np.ndarray      # (N, 2) integer (u, v), pairwise distinct
    directions: np.ndarray  # (N, 3) unit camera-frame rays
    features: np.ndarray    # (N, F) per-sample image features

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.pixels)
        if not (len(self.directions) == len(self.features) == n):
            raise ValueError("pixels, directions, features must have equal length")
        if n == 0:
            raise ValueError("observation sample must be nonempty")
        if len(np.unique(self.pixels[:, 0] * (1 << 32) + self.pixels[:, 1])) != n:
            raise ValueError("sampled pixels must be pairwise distinct")

    @property
    def n(self) -> int:
        return len(self.pixels)


@dataclass
class StepDiagnostics:
    ess: float
    mean_likelihood: float
    miss_ratio: float
    measurement_rejected: bool
    resampled: bool
    n_rays: int
    seconds_measurement: float = 0.0  # wall clock of weigh+resample+estimate


@dataclass
class MclConfig:
    """Knobs for one filter instance; defaults follow the reference setup."""

    n_particles: int = 1024
    rays_budget: int = 2048
    sampling: str = "stratified"        # or "uniform"
    predict_sigma_t: float = 0.05       # motion-model noise [m]
    predict_sigma_r: float = 2.0        # motion-model noise [deg]
    ess_threshold_fraction: float = 0.5
    estimate_radius_t: float = 0.5      # [m]
    estimate_radius_r: float = 30.0     # [deg]
    max_range: float = 20.0             # [m]
    centroid_subset: Optional[int] = None
    n_workers: int = 1
    planar: bool = False
    fixed_height: float = 0.0


def _clamp_planar(translations, rotations, fixed_height: float):
    """Force z, roll, pitch to (fixed_height, 0, 0) exactly."""
    translations = translations.copy()
    translations[:, 2] = fixed_height
    x, y, z, w = rotations.T
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    out = np.zeros_like(rotations)
    out[:, 2] = np.sin(0.5 * yaw)
    out[:, 3] = np.cos(0.5 * yaw)
    flip = out[:, 3] < 0
    out[flip] *= -1.0
    return translations, out


def init_gaussian(center: Pose, sigma_t: float, sigma_r_deg: float, n: int,
                  rng: np.random.Generator, planar: bool = False) -> ParticleSet:
    """n particles spread around a probable pose, weights uniform."""
    if n < 1:
        raise ValueError("particle count must be >= 1")
    offsets, dq = _sample_perturbations(n, sigma_t, sigma_r_deg, rng)
    t = center.translation + offsets
    q = quat_multiply(np.broadcast_to(center.rotation, (n, 4)), dq)
    flip = q[:, 3] < 0
    q[flip] *= -1.0
    fixed = float(center.translation[2])
    if planar:
        t, q = _clamp_planar(t, q, fixed)
    return ParticleSet(t, q, np.full(n, 1.0 / n), planar=planar, fixed_height=fixed)


def init_uniform(lo, hi, yaw_range, n: int, rng: np.random.Generator,
                 planar: bool = False, fixed_height: Optional[float] = None) -> ParticleSet:
    """n particles uniform over an axis-aligned box with uniform yaw."""
    if n < 1:
        raise ValueError("particle count must be >= 1")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    t = rng.uniform(0.0, 1.0, (n, 3)) * (hi - lo) + lo
    yaw = rng.uniform(yaw_range[0], yaw_range[1], n)
    q = np.zeros((n, 4))
    q[:, 2] = np.sin(0.5 * yaw)
    q[:, 3] = np.cos(0.5 * yaw)
    flip = q[:, 3] < 0
    q[flip] *= -1.0
    fh = float(fixed_height) if fixed_height is not None else float(0.5 * (lo[2] + hi[2]))
    if planar:
        t, q = _clamp_planar(t, q, fh)
    return ParticleSet(t, q, np.full(n, 1.0 / n), planar=planar, fixed_height=fh)


def init_from_poses(poses: Sequence[Pose], planar: bool = False) -> ParticleSet:
    """Particle per given pose, weights uniform."""
    if len(poses) == 0:
        raise ValueError("particle count must be >= 1")
    t = np.stack([p.translation for p in poses])
    q = np.stack([p.rotation for p in poses])
    fh = float(t[0, 2])
    if planar:
        t, q = _clamp_planar(t, q, fh)
    return ParticleSet(t, q, np.full(len(poses), 1.0 / len(poses)),
                       planar=planar, fixed_height=fh)


def predict(ps: ParticleSet, odom_delta: Pose, sigma_t: float, sigma_r_deg: float,
            rng: np.random.Generator) -> ParticleSet:
    """Compose every particle with an independently perturbed odometry delta."""
    n = ps.n
    offsets, dq = _sample_perturbations(n, sigma_t, sigma_r_deg, rng)
    noisy_t = odom_delta.translation + offsets          # (n, 3)
    noisy_q = quat_multiply(np.broadcast_to(odom_delta.rotation, (n, 4)), dq)
    R = quat_rotation_matrix(ps.rotations)              # (n, 3, 3)
    t = ps.translations + np.einsum("nij,nj->ni", R, noisy_t)
    q = quat_multiply(ps.rotations, noisy_q)
    flip = q[:, 3] < 0
    q[flip] *= -1.0
    if ps.planar:
        t, q = _clamp_planar(t, q, ps.fixed_height)
    return ParticleSet(t, q, ps.weights.copy(), planar=ps.planar,
                       fixed_height=ps.fixed_height)


def build_sampling_masks(image_features: np.ndarray, centroids, rays_budget: int,
                         rng: np.random.Generator,
                         intr: CameraIntrinsics) -> ObservationSample:
    """Stratified per-cluster pixel sampling.

    Pixels are clustered by their cosine-closest centroid; each nonempty
    cluster contributes an equal quota of uniformly sampled pixels, so
    small feature-consistent regions keep their vote. Duplicates are
    impossible because clusters partition the image. The realized total
    can fall below the budget when small clusters run out of pixels.
    """
    img = np.asarray(image_features, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] * img.shape[1] == 0:
        raise ValueError("image_features must be a nonempty (H, W, F) grid")
    if rays_budget < 1:
        raise ValueError("rays_budget must be >= 1")
    cmat = centroids.matrix if isinstance(centroids, FeatureDb) else np.asarray(centroids, dtype=np.float64)
    if len(cmat) == 0:
        raise ValueError("centroids must be nonempty")
    h, w, _ = img.shape
    flat = img.reshape(h * w, -1)
    assign = np.argmax(flat @ cmat.T, axis=1)
    counts = np.bincount(assign, minlength=len(cmat))
    nonempty = np.flatnonzero(counts)
    quota = math.ceil(rays_budget / len(nonempty))
    order = np.argsort(assign, kind="stable")
    bounds = np.cumsum(counts)
    picks = []
    for ci in nonempty:
        members = order[bounds[ci] - counts[ci]: bounds[ci]]
        take = min(quota, len(members))
        picks.append(rng.choice(members, size=take, replace=False))
    sel = np.concatenate(picks)
    pixels = np.stack([sel % w, sel // w], axis=1)  # (u, v)
    return ObservationSample(pixels, pixel_rays(intr, pixels), flat[sel])


def uniform_image_sample(image_features: np.ndarray, rays_budget: int,
                         rng: np.random.Generator,
                         intr: CameraIntrinsics) -> ObservationSample:
    """Baseline sampler: rays_budget pixels uniform over the whole image."""
    img = np.asarray(image_features, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] * img.shape[1] == 0:
        raise ValueError("image_features must be a nonempty (H, W, F) grid")
    if rays_budget < 1:
        raise ValueError("rays_budget must be >= 1")
    h, w, _ = img.shape
    flat = img.reshape(h * w, -1)
    sel = rng.choice(h * w, size=min(rays_budget, h * w), replace=False)
    pixels = np.stack([sel % w, sel // w], axis=1)
    return ObservationSample(pixels, pixel_rays(intr, pixels), flat[sel])


def weigh(ps: ParticleSet, obs: ObservationSample, map_: OctreeLanguageMap,
          max_range: float, n_workers: int = 1):
    """Measurement update: weights scale with per-particle mean ray similarity.

    Returns (particle set, mean likelihood, miss ratio, rejected flag).
    When every reweighted particle lands at exactly zero the update is
    rejected and weights reset to uniform instead of dying.
    """
    if not map_.finalized:
        raise MapStateError("weighting requires a finalized map")
    db = map_.db
    n, N = ps.n, obs.n
    R = quat_rotation_matrix(ps.rotations)                    # (n, 3, 3)
    world_dirs = np.einsum("nij,rj->nri", R, obs.directions)  # (n, N, 3)
    world_dirs = world_dirs.reshape(n * N, 3)
    origins = np.repeat(ps.translations, N, axis=0)

    total = n * N
    hit = np.zeros(total, dtype=bool)
    fidx = np.zeros(total, dtype=np.int32)
    chunks = [(s, min(s + _RAY_CHUNK, total)) for s in range(0, total, _RAY_CHUNK)]

    def run(span):
        s, e = span
        h, flat, _ = map_._trace_batch(origins[s:e], world_dirs[s:e], max_range)
        hit[s:e] = h
        if map_._trav is not None:
            fi = np.zeros(e - s, dtype=np.int32)
            w = np.flatnonzero(h)
            fi[w] = map_._trav.index_flat[flat[w]]
            fidx[s:e] = fi

    if n_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run, chunks))
    else:
        for span in chunks:
            run(span)

    sims = obs.features @ db.matrix.T                         # (N, n_db)
    norms = np.linalg.norm(obs.features, axis=1)
    sims = sims / np.where(norms[:, None] == 0.0, 1.0, norms[:, None])
    ray_sim = np.where(hit, sims[np.tile(np.arange(N), n), fidx], 0.0)
    L = ray_sim.reshape(n, N).mean(axis=1)

    w = ps.weights * np.maximum(L, 0.0)
    total_w = float(w.sum())
    rejected = total_w == 0.0
    if rejected:
        w = np.full(n, 1.0 / n)
    else:
        w = w / total_w
    out = ParticleSet(ps.translations, ps.rotations, w, planar=ps.planar,
                      fixed_height=ps.fixed_height)
    miss_ratio = 1.0 - float(hit.mean())
    return out, float(L.mean()), miss_ratio, rejected


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float(np.square(weights).sum())


def resample(ps: ParticleSet, ess_threshold_fraction: float,
             rng: np.random.Generator):
    """Low-variance systematic resampling, gated on effective sample size.

    Returns (particle set, resampled flag, pre-resample ESS).
    """
    ess = effective_sample_size(ps.weights)
    if ess >= ess_threshold_fraction * ps.n:
        return ps, False, ess
    n = ps.n
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(ps.weights)
    cumulative[-1] = 1.0  # guard fp undershoot in the final bin
    idx = np.searchsorted(cumulative, positions, side="right")
    idx = np.minimum(idx, n - 1)
    out = ParticleSet(ps.translations[idx].copy(), ps.rotations[idx].copy(),
                      np.full(n, 1.0 / n), planar=ps.planar,
                      fixed_height=ps.fixed_height)
    return out, True, ess


def estimate_pose(ps: ParticleSet, radius_t: float, radius_r_deg: float) -> Pose:
    """Weighted mean of the particles close to the most likely one.

    Translation is the weight-normalized mean; rotation averages
    quaternion components sign-aligned to the best particle, then
    renormalizes. The best particle always gates itself in.
    """
    k = int(np.argmax(ps.weights))
    dt = np.linalg.norm(ps.translations - ps.translations[k], axis=1)
    dots = np.abs(ps.rotations @ ps.rotations[k])
    ang = 2.0 * np.arccos(np.minimum(dots, 1.0))
    sel = (dt <= radius_t) & (ang <= math.radians(radius_r_deg))
    w = ps.weights[sel]
    wsum = float(w.sum())
    if wsum == 0.0:  # uniform-zero corner: fall back to the gated count
        w = np.full(len(w), 1.0 / len(w))
    else:
        w = w / wsum
    t = w @ ps.translations[sel]
    q = ps.rotations[sel].copy()
    signs = np.where(q @ ps.rotations[k] < 0.0, -1.0, 1.0)
    q = w @ (q * signs[:, None])
    nq = np.linalg.norm(q)
    if nq < 1e-12:
        q = ps.rotations[k]
    else:
        q = quat_canonical(q / nq)
    return Pose(t, q)


def step(ps: ParticleSet, odom_delta: Pose, image_features: np.ndarray,
         map_: OctreeLanguageMap, intr: CameraIntrinsics, config: MclConfig,
         rng: np.random.Generator):
    """One filter iteration: predict, sample rays, weigh, resample, estimate.

    Returns (particle set, pose estimate, StepDiagnostics). The rng is
    consumed in that fixed order, so a per-step seeded generator makes the
    whole step reproducible.
    """
    ps = predict(ps, odom_delta, config.predict_sigma_t, config.predict_sigma_r, rng)
    db = map_.db
    if config.centroid_subset is not None and config.centroid_subset < len(db):
        rows = rng.choice(len(db), size=config.centroid_subset, replace=False)
        centroids = db.matrix[np.sort(rows)]
    else:
        centroids = db
    if config.sampling == "stratified":
        obs = build_sampling_masks(image_features, centroids, config.rays_budget, rng, intr)
    elif config.sampling == "uniform":
        obs = uniform_image_sample(image_features, config.rays_budget, rng, intr)
    else:
        raise ValueError(f"unknown sampling strategy {config.sampling!r}")
    t0 = time.perf_counter()
    ps, mean_l, miss_ratio, rejected = weigh(ps, obs, map_, config.max_range,
                                             config.n_workers)
    ps, resampled, ess = resample(ps, config.ess_threshold_fraction, rng)
    est = estimate_pose(ps, config.estimate_radius_t, config.estimate_radius_r)
    seconds = time.perf_counter() - t0
    diag = StepDiagnostics(ess=ess, mean_likelihood=mean_l, miss_ratio=miss_ratio,
                           measurement_rejected=rejected, resampled=resampled,
                           n_rays=obs.n, seconds_measurement=seconds)
    return ps, est, diag
