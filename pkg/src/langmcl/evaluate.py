"""Trajectory and measurement-consistency metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import MapStateError
from .geometry import CameraIntrinsics, Pose, pixel_rays
from .langmap import OctreeLanguageMap

__all__ = [
    "ApeStats",
    "ConsistencyStats",
    "ape_stats",
    "translation_errors",
    "consistency_metrics",
    "metrics_from_confusion",
    "convergence_steps",
]


@dataclass(frozen=True)
class ApeStats:
    """Absolute (translation) pose error statistics, meters."""

    rmse: float
    std: float
    mean: float
    median: float
    min: float
    max: float
    sse: float
    count: int

    @staticmethod
    def from_errors(errors: np.ndarray) -> "ApeStats":
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            raise ValueError("error list must be nonempty")
        sse = float(np.square(e).sum())
        return ApeStats(
            rmse=float(np.sqrt(np.mean(np.square(e)))),
            std=float(np.std(e)),
            mean=float(np.mean(e)),
            median=float(np.median(e)),
            min=float(np.min(e)),
            max=float(np.max(e)),
            sse=sse,
            count=int(e.size),
        )


def _translations(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return traj.reshape(-1, 3)
    return np.stack([p.translation if isinstance(p, Pose) else np.asarray(p)
                     for p in traj])


def translation_errors(estimated, ground_truth) -> np.ndarray:
    est = _translations(estimated)
    gt = _translations(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    return np.linalg.norm(est - gt, axis=1)


def ape_stats(estimated, ground_truth) -> ApeStats:
    """Per-index translation APE; trajectories share a frame (no alignment)."""
    return ApeStats.from_errors(translation_errors(estimated, ground_truth))


@dataclass(frozen=True)
class ConsistencyStats:
    """Classification agreement between observed and mapped features.

    Every database entry counts as one class. Accuracy is the overall
    correct fraction; precision, recall, and IoU are macro-averaged over
    the classes that occur. All four are percentages.
    """

    accuracy: float
    precision: float
    recall: float
    iou: float
    miss_ratio: float
    confusion: np.ndarray

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "miss_ratio": self.miss_ratio,
        }


def metrics_from_confusion(confusion: np.ndarray, miss_ratio: float = 0.0) -> ConsistencyStats:
    """Reduce a (true, predicted) count matrix to the four percentages."""
    m = np.asarray(confusion, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = int(m.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(m).astype(np.float64)
    row = m.sum(axis=1).astype(np.float64)   # true occurrences
    col = m.sum(axis=0).astype(np.float64)   # predictions
    present = (row + col) > 0
    precisions, recalls, ious = [], [], []
    for c in np.flatnonzero(present):
        if col[c] > 0:
            precisions.append(100.0 * tp[c] / col[c])
        if row[c] > 0:
            recalls.append(100.0 * tp[c] / row[c])
        union = row[c] + col[c] - tp[c]
        if union > 0:
            ious.append(100.0 * tp[c] / union)
    return ConsistencyStats(
        accuracy=100.0 * float(tp.sum()) / total,
        precision=float(np.mean(precisions)) if precisions else 0.0,
        recall=float(np.mean(recalls)) if recalls else 0.0,
        iou=float(np.mean(ious)) if ious else 0.0,
        miss_ratio=miss_ratio,
        confusion=m,
    )


def consistency_metrics(map_: OctreeLanguageMap, frames, intr: CameraIntrinsics,
                        sample_budget: int, rng: np.random.Generator) -> ConsistencyStats:
    """Agreement between per-pixel features and ray-cast map entries.

    For sampled pixels of each (pose, feature grid) frame, the class
    predicted from the pixel feature (nearest database entry) is compared
    with the entry of the first voxel its ray hits. Rays that miss the
    map are excluded from the matrix and reported as the miss ratio. The
    same pixel sample is reused for every frame, which keeps the result
    invariant to frame order.
    """
    if not map_.finalized:
        raise MapStateError("consistency evaluation requires a finalized map")
    db = map_.db
    n_px = intr.width * intr.height
    sel = rng.choice(n_px, size=min(sample_budget, n_px), replace=False)
    pixels = np.stack([sel % intr.width, sel // intr.width], axis=1)
    dirs_cam = pixel_rays(intr, pixels)

    confusion = np.zeros((len(db), len(db)), dtype=np.int64)
    misses = 0
    total_rays = 0
    for pose, image in frames:
        feats = np.asarray(image, dtype=np.float64).reshape(n_px, -1)[sel]
        dirs = dirs_cam @ pose.rotation_matrix().T
        hit, flat, _ = map_._trace_batch(
            np.broadcast_to(pose.translation, dirs.shape), dirs, np.inf
        )
        total_rays += len(dirs)
        misses += int((~hit).sum())
        if not hit.any():
            continue
        w = np.flatnonzero(hit)
        true_idx = map_._trav.index_flat[flat[w]]
        norms = np.linalg.norm(feats[w], axis=1, keepdims=True)
        sims = (feats[w] / np.where(norms == 0.0, 1.0, norms)) @ db.matrix.T
        pred_idx = sims.argmax(axis=1)
        np.add.at(confusion, (true_idx, pred_idx), 1)
    if total_rays == 0:
        raise ValueError("no frames supplied")
    return metrics_from_confusion(confusion, miss_ratio=misses / total_rays)


def convergence_steps(estimated, ground_truth, thresholds: Sequence[float],
                      persistence: int = 3) -> dict[float, Optional[int]]:
    """First step at which translation error drops and stays below each threshold.

    "Stays" means ``persistence`` consecutive in-threshold steps (or below
    through the end of the run when it ends sooner). None when never
    achieved.
    """
    errors = translation_errors(estimated, ground_truth)
    out: dict[float, Optional[int]] = {}
    for thr in thresholds:
        if thr <= 0:
            raise ValueError("thresholds must be positive")
        below = errors < thr
        found: Optional[int] = None
        for i in range(len(below)):
            stretch = below[i : i + persistence]
            if stretch.all() and (i + persistence <= len(below) or below[i:].all()):
                found = i
                break
        out[float(thr)] = found
    return out
