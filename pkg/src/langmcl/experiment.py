"""End-to-end pipelines: scene to map to localization to metrics.

run_tracking and run_global drive single localization runs; run_experiment
executes seeded sweeps over particle counts, ray budgets, and sampling
strategies, emitting CSV reports. All randomness derives from one master
seed through fixed-purpose substreams, so any run is bitwise reproducible
(timing files are the documented exception).
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluate import ApeStats, ape_stats, consistency_metrics, convergence_steps, \
    translation_errors
from .features import encode_label
from .geometry import CameraIntrinsics, Pose, perturb_pose
from .langmap import OctreeLanguageMap, from_point_cloud
from .mcl import MclConfig, ParticleSet, estimate_pose, init_gaussian, init_uniform, step
from .prompt_init import PromptSpec, floor_voxels, prompt_alignment, seed_particles
from .sim import DenseScene, SceneSpec, generate_scene, generate_trajectory, \
    parse_kv_file, render_frame, scene_feature_cloud, ObjectClassSpec

__all__ = [
    "PipelineConfig",
    "TrackingResult",
    "GlobalResult",
    "build_world",
    "run_tracking",
    "run_global",
    "run_experiment",
    "prompt_for_position",
]

# rng substream purposes
_TRAJ, _OBS, _ODOM, _STEP, _INIT, _EVAL = 1, 2, 3, 4, 5, 6


def _rng(master: int, domain: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, domain, index]))


@dataclass
class PipelineConfig:
    """Everything one localization run needs."""

    scene: SceneSpec
    dim: int = 48
    encoder_seed: int = 11
    tau: float = 0.02
    map_resolution: Optional[float] = None   # defaults to the scene resolution
    image_size: int = 96
    focal: float = 64.0
    steps: int = 40
    camera_height: float = 1.2
    step_length: float = 0.13
    turn_sigma_deg: float = 10.0
    pitch_deg: float = 12.0
    feature_noise: float = 0.0   # total scale s; per-component sigma = s/sqrt(F)
    odom_sigma_t: float = 0.10
    odom_sigma_r: float = 6.0
    init_sigma_t: float = 0.3
    init_sigma_r: float = 17.0
    mcl: MclConfig = field(default_factory=MclConfig)
    master_seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        s = self.image_size
        return CameraIntrinsics(self.focal, self.focal, s / 2.0, s / 2.0, s, s)

    @property
    def noise_sigma(self) -> float:
        return self.feature_noise / math.sqrt(self.dim)


@dataclass
class World:
    scene: DenseScene
    map: OctreeLanguageMap


_world_cache: dict = {}


def build_world(cfg: PipelineConfig) -> World:
    """Scene plus its finalized feature map (cached across runs)."""
    key = (cfg.scene, cfg.dim, cfg.encoder_seed, cfg.tau, cfg.map_resolution)
    world = _world_cache.get(key)
    if world is not None:
        return world
    scene = generate_scene(cfg.scene)
    res = cfg.map_resolution or cfg.scene.resolution
    map_ = OctreeLanguageMap(res)
    for pts, feats in scene_feature_cloud(scene, cfg.encoder_seed, cfg.dim):
        map_.integrate_frame(pts, feats)
    map_.finalize(cfg.tau)
    world = World(scene, map_)
    _world_cache[key] = world
    return world


def _noisy_odometry(gt: Sequence[Pose], cfg: PipelineConfig) -> list[Pose]:
    out = []
    for i, p in enumerate(gt):
        out.append(perturb_pose(p, cfg.odom_sigma_t, cfg.odom_sigma_r,
                                _rng(cfg.master_seed, _ODOM, i)))
    return out


@dataclass
class TrackingResult:
    estimates: list[Pose]
    ground_truth: list[Pose]
    diagnostics: list
    ape: ApeStats
    final_ape: ApeStats
    fps: float
    track_lost: bool

    def errors(self) -> np.ndarray:
        return translation_errors(self.estimates, self.ground_truth)


def _final_segment(n: int, fraction: float = 1.0 / 3.0) -> slice:
    start = max(1, int(math.floor(n * (1.0 - fraction))))
    return slice(start, n)


def run_tracking(cfg: PipelineConfig, world: Optional[World] = None,
                 track_loss_threshold: float = 1.0) -> TrackingResult:
    """Pose tracking along a generated trajectory with noisy odometry."""
    world = world or build_world(cfg)
    scene, map_ = world.scene, world.map
    intr = cfg.intrinsics
    gt = generate_trajectory(scene, cfg.steps, cfg.master_seed,
                             camera_height=cfg.camera_height,
                             step_length=cfg.step_length,
                             turn_sigma_deg=cfg.turn_sigma_deg,
                             pitch_deg=cfg.pitch_deg)
    odom = _noisy_odometry(gt, cfg)
    ps = init_gaussian(odom[0], cfg.init_sigma_t, cfg.init_sigma_r,
                       cfg.mcl.n_particles, _rng(cfg.master_seed, _INIT))
    estimates = [estimate_pose(ps, cfg.mcl.estimate_radius_t, cfg.mcl.estimate_radius_r)]
    diagnostics = []
    meas_seconds = 0.0
    for t in range(1, len(gt)):
        delta = odom[t - 1].inverse().compose(odom[t])
        frame = render_frame(scene, gt[t], intr, cfg.encoder_seed,
                             cfg.noise_sigma, _rng(cfg.master_seed, _OBS, t),
                             dim=cfg.dim)
        ps, est, diag = step(ps, delta, frame.features, map_, intr, cfg.mcl,
                             _rng(cfg.master_seed, _STEP, t))
        estimates.append(est)
        diagnostics.append(diag)
        meas_seconds += diag.seconds_measurement
    ape = ape_stats(estimates, gt)
    seg = _final_segment(len(gt))
    final = ape_stats(estimates[seg], gt[seg])
    errors = translation_errors(estimates, gt)
    lost = bool(np.any(errors[len(errors) // 2:] > track_loss_threshold))
    fps = (len(gt) - 1) / meas_seconds if meas_seconds > 0 else float("inf")
    return TrackingResult(estimates, gt, diagnostics, ape, final, fps, lost)


def run_consistency(cfg: PipelineConfig, world: Optional[World] = None,
                    n_frames: int = 6, sample_budget: int = 2048):
    """Measurement-map consistency over evenly spaced trajectory frames."""
    world = world or build_world(cfg)
    scene, map_ = world.scene, world.map
    intr = cfg.intrinsics
    gt = generate_trajectory(scene, cfg.steps, cfg.master_seed,
                             camera_height=cfg.camera_height,
                             step_length=cfg.step_length,
                             turn_sigma_deg=cfg.turn_sigma_deg,
                             pitch_deg=cfg.pitch_deg)
    picks = np.linspace(1, len(gt) - 1, num=min(n_frames, len(gt) - 1), dtype=int)
    frames = []
    for t in picks:
        fr = render_frame(scene, gt[t], intr, cfg.encoder_seed, cfg.noise_sigma,
                          _rng(cfg.master_seed, _OBS, int(t)), dim=cfg.dim)
        frames.append((gt[t], fr.features))
    return consistency_metrics(map_, frames, intr, sample_budget,
                               _rng(cfg.master_seed, _EVAL))


def prompt_for_position(scene: DenseScene, position, radius: float,
                        max_words: int = 5) -> list[str]:
    """Object labels present within ``radius`` of a position, nearest first.

    Emulates a user describing their surroundings; structural labels
    (floor, wall) are skipped.
    """
    pos = np.asarray(position, dtype=np.float64)
    res = scene.resolution
    coords = np.argwhere(scene.grid > 1)  # objects only
    if len(coords) == 0:
        return []
    centers = (coords + 0.5) * res
    d = np.linalg.norm(centers - pos, axis=1)
    order = np.argsort(d, kind="stable")
    words: list[str] = []
    for i in order:
        if d[i] > radius:
            break
        lab = scene.labels[scene.grid[tuple(coords[i])]]
        if lab not in words:
            words.append(lab)
            if len(words) >= max_words:
                break
    return words


@dataclass
class GlobalResult:
    estimates: list[Pose]
    ground_truth: list[Pose]
    errors: np.ndarray
    steps_to: dict[float, Optional[int]]
    used_prompt_fallback: bool


def run_global(cfg: PipelineConfig, init: str = "uniform",
               prompt: Optional[PromptSpec] = None,
               world: Optional[World] = None,
               thresholds: Sequence[float] = (2.0, 1.0, 0.5, 0.2, 0.1)) -> GlobalResult:
    """Global localization from uniform or prompt-seeded particles."""
    world = world or build_world(cfg)
    scene, map_ = world.scene, world.map
    intr = cfg.intrinsics
    gt = generate_trajectory(scene, cfg.steps, cfg.master_seed,
                             camera_height=cfg.camera_height,
                             step_length=cfg.step_length,
                             turn_sigma_deg=cfg.turn_sigma_deg,
                             pitch_deg=cfg.pitch_deg)
    odom = _noisy_odometry(gt, cfg)
    z = scene.floor_height + cfg.camera_height
    rng_init = _rng(cfg.master_seed, _INIT)
    fallback = False
    if init == "uniform":
        ext = scene.extent
        ps = init_uniform((0.0, 0.0, z), (ext[0], ext[1], z), (0.0, 2.0 * math.pi),
                          cfg.mcl.n_particles, rng_init)
    elif init == "prompt":
        if prompt is None:
            raise ValueError("prompt initialization needs a PromptSpec")
        floor = floor_voxels(map_, encoder_seed=cfg.encoder_seed)
        aligns = prompt_alignment(map_, floor, prompt, cfg.encoder_seed)
        ps, fallback = seed_particles(
            aligns, cfg.mcl.n_particles,
            height=z - (float(floor[:, 2].mean()) + 0.5) * map_.resolution,
            rng=rng_init, resolution=map_.resolution, origin=map_.origin)
    else:
        raise ValueError(f"unknown init mode {init!r}")

    estimates = [estimate_pose(ps, cfg.mcl.estimate_radius_t, cfg.mcl.estimate_radius_r)]
    for t in range(1, len(gt)):
        delta = odom[t - 1].inverse().compose(odom[t])
        frame = render_frame(scene, gt[t], intr, cfg.encoder_seed, cfg.noise_sigma,
                             _rng(cfg.master_seed, _OBS, t), dim=cfg.dim)
        ps, est, _ = step(ps, delta, frame.features, map_, intr, cfg.mcl,
                          _rng(cfg.master_seed, _STEP, t))
        estimates.append(est)
    errors = translation_errors(estimates, gt)
    steps_to = convergence_steps(estimates, gt, thresholds)
    return GlobalResult(estimates, gt, errors, steps_to, fallback)


# -- sweeps -------------------------------------------------------------------


_SWEEP_LIST_KEYS = {"particles", "rays", "sampling", "seeds"}
_SWEEP_SCALAR_KEYS = {"dim", "steps", "tau", "feature_noise", "odom_sigma_t",
                      "odom_sigma_r", "image_size", "focal", "encoder_seed",
                      "camera_height", "max_range", "predict_sigma_t",
                      "predict_sigma_r", "workers"}


def parse_sweep_config(path) -> dict:
    """Sweep file: scene.* keys plus sweep lists; see README for the schema."""
    scene_kwargs: dict = {}
    objects: list[ObjectClassSpec] = []
    sweep: dict = {
        "particles": [256], "rays": [512], "sampling": ["stratified"], "seeds": [0],
    }
    for key, value, ln in parse_kv_file(path):
        where = f"{path}:{ln}: {key}"
        try:
            if key.startswith("scene."):
                sub = key[len("scene."):]
                if sub == "extent":
                    scene_kwargs["extent"] = tuple(float(x) for x in value.split())
                elif sub in ("resolution", "wall_thickness", "door_width", "floor_tiles",
                             "wall_texture"):
                    scene_kwargs[sub] = float(value)
                elif sub in ("rooms", "seed"):
                    scene_kwargs[sub] = int(value)
                elif sub == "ceiling":
                    scene_kwargs[sub] = value.lower() in ("true", "1")
                elif sub == "object":
                    p = value.split()
                    hs = (float(p[4]), float(p[5])) if len(p) == 6 else (None, None)
                    objects.append(ObjectClassSpec(p[0], int(p[1]), float(p[2]),
                                                   float(p[3]), *hs))
                else:
                    raise ValueError("unknown scene key")
            elif key in ("particles", "rays", "seeds"):
                sweep[key] = [int(x) for x in value.split()]
            elif key == "sampling":
                modes = value.split()
                if any(m not in ("stratified", "uniform") for m in modes):
                    raise ValueError("sampling must be stratified and/or uniform")
                sweep[key] = modes
            elif key in _SWEEP_SCALAR_KEYS:
                sweep[key] = float(value) if key not in ("dim", "steps", "image_size",
                                                         "encoder_seed", "workers") else int(value)
            else:
                raise ValueError("unknown sweep key")
        except (ValueError, IndexError) as e:
            raise ValueError(f"{where}: {e}") from None
    if "extent" in scene_kwargs or objects:
        sweep["scene"] = SceneSpec(objects=tuple(objects), **scene_kwargs)
    return sweep


def _cfg_from_sweep(sw: dict, particles: int, rays: int, sampling: str,
                    seed: int) -> PipelineConfig:
    mcl = MclConfig(
        n_particles=particles,
        rays_budget=rays,
        sampling=sampling,
        max_range=sw.get("max_range", 20.0),
        predict_sigma_t=sw.get("predict_sigma_t", 0.05),
        predict_sigma_r=sw.get("predict_sigma_r", 2.0),
        n_workers=sw.get("workers", 1),
    )
    return PipelineConfig(
        scene=sw.get("scene", SceneSpec()),
        dim=sw.get("dim", 48),
        encoder_seed=sw.get("encoder_seed", 11),
        tau=sw.get("tau", 0.02),
        image_size=sw.get("image_size", 96),
        focal=sw.get("focal", 64.0),
        steps=sw.get("steps", 40),
        camera_height=sw.get("camera_height", 1.2),
        feature_noise=sw.get("feature_noise", 0.0),
        odom_sigma_t=sw.get("odom_sigma_t", 0.10),
        odom_sigma_r=sw.get("odom_sigma_r", 6.0),
        mcl=mcl,
        master_seed=seed,
    )


def run_experiment(config_path, out_dir) -> list[Path]:
    """Execute a sweep config; emit results.csv, summary.csv, timings.csv.

    results.csv and summary.csv are bitwise-deterministic for a fixed
    config; wall-clock FPS lives in timings.csv.
    """
    sw = parse_sweep_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    summary_path = out / "summary.csv"
    timings_path = out / "timings.csv"

    rows = []
    timing_rows = []
    for particles, rays, sampling in itertools.product(
            sw["particles"], sw["rays"], sw["sampling"]):
        for seed in sw["seeds"]:
            cfg = _cfg_from_sweep(sw, particles, rays, sampling, seed)
            world = build_world(cfg)
            res = run_tracking(cfg, world)
            cons = run_consistency(cfg, world)
            rows.append({
                "particles": particles, "rays": rays, "sampling": sampling,
                "seed": seed,
                "ape_rmse": res.ape.rmse, "ape_std": res.ape.std,
                "ape_mean": res.ape.mean, "ape_median": res.ape.median,
                "ape_min": res.ape.min, "ape_max": res.ape.max,
                "ape_sse": res.ape.sse,
                "final_ape_rmse": res.final_ape.rmse,
                "track_lost": int(res.track_lost),
                "consistency_accuracy": cons.accuracy,
                "consistency_iou": cons.iou,
            })
            timing_rows.append({
                "particles": particles, "rays": rays, "sampling": sampling,
                "seed": seed, "fps": res.fps,
            })

    _write_csv(results_path, rows)
    _write_csv(timings_path, timing_rows)

    summary = []
    for (particles, rays, sampling), group in itertools.groupby(
            rows, key=lambda r: (r["particles"], r["rays"], r["sampling"])):
        g = list(group)
        summary.append({
            "particles": particles, "rays": rays, "sampling": sampling,
            "runs": len(g),
            "mean_ape_rmse": float(np.mean([r["ape_rmse"] for r in g])),
            "mean_final_ape_rmse": float(np.mean([r["final_ape_rmse"] for r in g])),
            "completed": sum(1 - r["track_lost"] for r in g),
            "mean_consistency_accuracy": float(np.mean([r["consistency_accuracy"] for r in g])),
        })
    _write_csv(summary_path, summary)
    return [results_path, summary_path, timings_path]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        if not rows:
            return
        w = csv.writer(f)
        w.writerow(rows[0].keys())
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])
