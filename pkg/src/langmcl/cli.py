"""Command-line surface.

Subcommands: simulate, map build, map ground, localize, global-localize,
eval, sweep. Every command exits 0 on success and 1 with an ``error:``
diagnostic on failure; run any of them with --help for the flags.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import GenerationError, MapCorruptionError, MapFormatError, \
    MapIOError, MapStateError
from .evaluate import ape_stats, convergence_steps
from .features import ground_db
from .geometry import CameraIntrinsics, Pose, load_trajectory, save_trajectory
from .langmap import OctreeLanguageMap, from_point_cloud, load_feature_cloud, \
    load_map, save_feature_cloud
from .mcl import MclConfig, estimate_pose, init_gaussian, init_uniform, step
from .prompt_init import PromptSpec, floor_voxels, prompt_alignment, seed_particles
from .sim import generate_scene, generate_trajectory, load_feature_image, \
    parse_scene_config, render_frame, save_feature_image, scene_feature_cloud
from .experiment import run_experiment

_ERRORS = (ValueError, LookupError, GenerationError, MapStateError, MapFormatError,
           MapIOError, MapCorruptionError, FileNotFoundError, NotADirectoryError)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        args.func(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="langmcl",
        description="Monte Carlo localization on language-feature voxel maps.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command")

    sim = sub.add_parser("simulate", help="generate a scene, trajectory, and frames")
    sim.add_argument("--scene", required=True, help="scene key-value config file")
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--steps", type=int, default=40)
    sim.add_argument("--seed", type=int, default=0, help="trajectory/noise master seed")
    sim.add_argument("--dim", type=int, default=64, help="feature dimension F")
    sim.add_argument("--encoder-seed", type=int, default=11)
    sim.add_argument("--image-size", type=int, default=64)
    sim.add_argument("--focal", type=float, default=None,
                     help="focal length in pixels (default image size / 2)")
    sim.add_argument("--camera-height", type=float, default=1.2)
    sim.add_argument("--feature-noise", type=float, default=0.0,
                     help="total noise scale s; per-component sigma = s/sqrt(F)")
    sim.add_argument("--odom-sigma-t", type=float, default=0.10)
    sim.add_argument("--odom-sigma-r", type=float, default=6.0)
    sim.add_argument("--cloud", action="store_true",
                     help="also write the scene feature cloud (cloud.txt)")
    sim.set_defaults(func=_cmd_simulate)

    mp = sub.add_parser("map", help="map construction and grounding")
    mps = mp.add_subparsers(dest="map_command")
    build = mps.add_parser("build", help="build a map from a feature cloud or frames")
    build.add_argument("--cloud", help="feature-cloud text file")
    build.add_argument("--frames", help="directory of feature images (with poses)")
    build.add_argument("--poses", help="trajectory file for --frames")
    build.add_argument("--scene", help="scene config for --frames depth rendering")
    build.add_argument("--resolution", type=float, required=True)
    build.add_argument("--tau", type=float, default=0.02)
    build.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    build.add_argument("--out", required=True)
    build.set_defaults(func=_cmd_map_build)
    ground = mps.add_parser("ground", help="ground a map onto prompt labels")
    ground.add_argument("--map", required=True, dest="map_path")
    ground.add_argument("--labels", required=True, help="comma-separated label list")
    ground.add_argument("--encoder-seed", type=int, default=11)
    ground.add_argument("--discard-threshold", type=float, default=0.5)
    ground.add_argument("--out", required=True)
    ground.set_defaults(func=_cmd_map_ground)

    loc = sub.add_parser("localize", help="pose tracking on recorded frames")
    _localize_flags(loc)
    loc.add_argument("--init-sigma-t", type=float, default=0.3)
    loc.add_argument("--init-sigma-r", type=float, default=17.0)
    loc.set_defaults(func=_cmd_localize)

    glo = sub.add_parser("global-localize",
                         help="global localization from a prompt or uniform spread")
    _localize_flags(glo)
    group = glo.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt", help="comma-separated word list")
    group.add_argument("--uniform", action="store_true")
    glo.add_argument("--height", type=float, default=1.2,
                     help="camera height above matched floor voxels")
    glo.add_argument("--radius", type=float, default=2.0)
    glo.add_argument("--rho", type=float, default=0.9)
    glo.add_argument("--min-count", type=int, default=500)
    glo.add_argument("--encoder-seed", type=int, default=11)
    glo.set_defaults(func=_cmd_global_localize)

    ev = sub.add_parser("eval", help="APE statistics for an estimate file")
    ev.add_argument("--estimates", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--convergence", help="comma-separated thresholds in meters")
    ev.add_argument("--final-fraction", type=float, default=None,
                    help="also report APE over the final fraction of the run")
    ev.add_argument("--out", help="write the stats as a CSV row")
    ev.set_defaults(func=_cmd_eval)

    sw = sub.add_parser("sweep", help="run an experiment sweep config")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out-dir", required=True)
    sw.set_defaults(func=_cmd_sweep)
    return p


def _localize_flags(p) -> None:
    p.add_argument("--map", required=True, dest="map_path")
    p.add_argument("--odom", required=True, help="odometry trajectory file")
    p.add_argument("--frames", required=True, help="directory of NNNNNN.omci frames")
    p.add_argument("--out-estimates", required=True)
    p.add_argument("--out-diagnostics")
    p.add_argument("--particles", type=int, default=1024)
    p.add_argument("--rays", type=int, default=2048)
    p.add_argument("--sampling", choices=("stratified", "uniform"), default="stratified")
    p.add_argument("--predict-sigma-t", type=float, default=0.05)
    p.add_argument("--predict-sigma-r", type=float, default=2.0)
    p.add_argument("--max-range", type=float, default=20.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--planar", action="store_true",
                   help="constrain particles to fixed height and yaw only")


def _cmd_simulate(args) -> None:
    spec = parse_scene_config(args.scene)
    scene = generate_scene(spec)
    out = Path(args.out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    gt = generate_trajectory(scene, args.steps, args.seed,
                             camera_height=args.camera_height)
    save_trajectory(out / "gt.txt", gt)
    rng_odom = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
    odom = []
    from .geometry import perturb_pose
    for p in gt:
        odom.append(perturb_pose(p, args.odom_sigma_t, args.odom_sigma_r, rng_odom))
    save_trajectory(out / "odom.txt", odom)
    focal = args.focal if args.focal is not None else args.image_size / 2.0
    intr = CameraIntrinsics(focal, focal, args.image_size / 2.0,
                            args.image_size / 2.0, args.image_size, args.image_size)
    sigma = args.feature_noise / math.sqrt(args.dim)
    for t, pose in enumerate(gt):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2, t]))
        frame = render_frame(scene, pose, intr, args.encoder_seed, sigma, rng,
                             dim=args.dim)
        save_feature_image(out / "frames" / f"{t:06d}.omci", frame.features)
    if args.cloud:
        pts_all, feat_all = [], []
        for pts, feats in scene_feature_cloud(scene, args.encoder_seed, args.dim):
            pts_all.append(pts)
            feat_all.append(feats)
        save_feature_cloud(out / "cloud.txt", np.concatenate(pts_all),
                           np.concatenate(feat_all))
    print(f"simulated {len(gt)} frames into {out}")


def _cmd_map_build(args) -> None:
    if args.cloud and args.frames:
        raise ValueError("pass either --cloud or --frames, not both")
    if args.cloud:
        pts, feats = load_feature_cloud(args.cloud)
        if len(pts) == 0:
            raise ValueError("feature cloud is empty")
        m = from_point_cloud(pts, feats, args.resolution, origin=args.origin)
    elif args.frames:
        if not args.poses or not args.scene:
            raise ValueError("--frames needs --poses and --scene (for depth)")
        spec = parse_scene_config(args.scene)
        scene = generate_scene(spec)
        _, poses = load_trajectory(args.poses)
        frame_dir = Path(args.frames)
        m = OctreeLanguageMap(args.resolution, origin=args.origin)
        for t, pose in enumerate(poses):
            img = load_feature_image(frame_dir / f"{t:06d}.omci")
            h, w, dim = img.shape
            intr = CameraIntrinsics(w / 2.0, w / 2.0, w / 2.0, h / 2.0, w, h)
            ref = render_frame(scene, pose, intr, 0, 0.0, dim=2)
            hit = ref.hit.ravel()
            m.integrate_frame(ref.points.reshape(-1, 3)[hit],
                              img.reshape(-1, dim)[hit])
    else:
        raise ValueError("pass --cloud or --frames")
    m.finalize(args.tau)
    m.save(args.out)
    print(f"map: {len(m)} voxels, {len(m.db)} database entries -> {args.out}")


def _cmd_map_ground(args) -> None:
    m = load_map(args.map_path)
    labels = _word_list(args.labels)
    grounded, remap = ground_db(m.db, labels, args.encoder_seed,
                                args.discard_threshold)
    out = m.apply_grounding_remap(remap, grounded)
    out.save(args.out)
    dropped = sum(1 for r in remap if r is None)
    print(f"grounded onto {len(labels)} labels, dropped {dropped} entries -> {args.out}")


def _word_list(text: str) -> list[str]:
    words = [w.strip() for w in text.split(",") if w.strip()]
    if not words:
        raise ValueError("word list is empty")
    return words


def _load_frames(frames_dir, count: int):
    d = Path(frames_dir)
    out = []
    for t in range(count):
        path = d / f"{t:06d}.omci"
        if not path.exists():
            raise FileNotFoundError(f"missing frame {path}")
        out.append(load_feature_image(path))
    return out


def _intrinsics_for(args, image) -> CameraIntrinsics:
    h, w, _ = image.shape
    focal = args.focal if args.focal is not None else w / 2.0
    return CameraIntrinsics(focal, focal, w / 2.0, h / 2.0, w, h)


def _run_filter(args, m, ps, odom, frames, intr):
    cfg = MclConfig(
        n_particles=args.particles, rays_budget=args.rays, sampling=args.sampling,
        predict_sigma_t=args.predict_sigma_t, predict_sigma_r=args.predict_sigma_r,
        max_range=args.max_range, n_workers=args.workers, planar=args.planar,
    )
    estimates = [estimate_pose(ps, cfg.estimate_radius_t, cfg.estimate_radius_r)]
    diagnostics = []
    for t in range(1, len(odom)):
        delta = odom[t - 1].inverse().compose(odom[t])
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 4, t]))
        ps, est, diag = step(ps, delta, frames[t], m, intr, cfg, rng)
        estimates.append(est)
        diagnostics.append(diag)
    return estimates, diagnostics


def _write_outputs(args, estimates, diagnostics) -> None:
    save_trajectory(args.out_estimates, estimates)
    if args.out_diagnostics:
        with open(args.out_diagnostics, "w", encoding="ascii") as f:
            f.write("step,ess,mean_L,miss_ratio,est_x,est_y,est_z,"
                    "est_qx,est_qy,est_qz,est_qw\n")
            for t, diag in enumerate(diagnostics, start=1):
                e = estimates[t]
                tx, ty, tz = e.translation
                qx, qy, qz, qw = e.rotation
                f.write(f"{t},{diag.ess:.6g},{diag.mean_likelihood:.6g},"
                        f"{diag.miss_ratio:.6g},{tx:.9g},{ty:.9g},{tz:.9g},"
                        f"{qx:.9g},{qy:.9g},{qz:.9g},{qw:.9g}\n")


def _cmd_localize(args) -> None:
    m = load_map(args.map_path)
    _, odom = load_trajectory(args.odom)
    frames = _load_frames(args.frames, len(odom))
    intr = _intrinsics_for(args, frames[0])
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 5]))
    ps = init_gaussian(odom[0], args.init_sigma_t, args.init_sigma_r,
                       args.particles, rng, planar=args.planar)
    estimates, diagnostics = _run_filter(args, m, ps, odom, frames, intr)
    _write_outputs(args, estimates, diagnostics)
    print(f"localized {len(estimates)} steps -> {args.out_estimates}")


def _cmd_global_localize(args) -> None:
    m = load_map(args.map_path)
    _, odom = load_trajectory(args.odom)
    frames = _load_frames(args.frames, len(odom))
    intr = _intrinsics_for(args, frames[0])
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 5]))
    if args.uniform:
        coords = m.voxel_coords
        lo = m.origin + coords.min(axis=0) * m.resolution
        hi = m.origin + (coords.max(axis=0) + 1) * m.resolution
        z = lo[2] + m.resolution + args.height
        ps = init_uniform((lo[0], lo[1], z), (hi[0], hi[1], z),
                          (0.0, 2.0 * math.pi), args.particles, rng,
                          planar=args.planar, fixed_height=z)
    else:
        words = _word_list(args.prompt)
        prompt = PromptSpec(tuple(words), radius=args.radius, rho=args.rho,
                            min_count=args.min_count)
        floor = floor_voxels(m, encoder_seed=args.encoder_seed)
        if len(floor) == 0:
            raise ValueError("no floor voxels found in the map")
        aligns = prompt_alignment(m, floor, prompt, args.encoder_seed)
        ps, fallback = seed_particles(aligns, args.particles, args.height, rng,
                                      m.resolution, m.origin)
        if fallback:
            print("note: no floor voxel matched all words; seeding from best scores",
                  file=sys.stderr)
    estimates, diagnostics = _run_filter(args, m, ps, odom, frames, intr)
    _write_outputs(args, estimates, diagnostics)
    print(f"globally localized {len(estimates)} steps -> {args.out_estimates}")


def _cmd_eval(args) -> None:
    _, est = load_trajectory(args.estimates)
    _, gt = load_trajectory(args.gt)
    stats = ape_stats(est, gt)
    print(f"APE translation over {stats.count} poses:")
    print(f"  rmse {stats.rmse:.4f} m   std {stats.std:.4f} m   mean {stats.mean:.4f} m")
    print(f"  median {stats.median:.4f} m   min {stats.min:.4f} m   "
          f"max {stats.max:.4f} m   sse {stats.sse:.4f} m^2")
    if args.final_fraction:
        n = len(est)
        start = max(0, int(n * (1.0 - args.final_fraction)))
        fstats = ape_stats(est[start:], gt[start:])
        print(f"  final {n - start} poses: rmse {fstats.rmse:.4f} m")
    if args.convergence:
        thresholds = [float(x) for x in args.convergence.split(",")]
        steps = convergence_steps(est, gt, thresholds)
        for thr in thresholds:
            got = steps[float(thr)]
            print(f"  converged to {thr} m: " +
                  (f"step {got}" if got is not None else "never"))
    if args.out:
        with open(args.out, "w", encoding="ascii") as f:
            f.write("rmse,std,mean,median,min,max,sse,count\n")
            f.write(f"{stats.rmse:.9g},{stats.std:.9g},{stats.mean:.9g},"
                    f"{stats.median:.9g},{stats.min:.9g},{stats.max:.9g},"
                    f"{stats.sse:.9g},{stats.count}\n")


def _cmd_sweep(args) -> None:
    files = run_experiment(args.config, args.out_dir)
    for f in files:
        print(f"wrote {f}")


if __name__ == "__main__":
    sys.exit(main())
