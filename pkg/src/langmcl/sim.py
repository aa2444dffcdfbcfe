"""Synthetic scenes, trajectories, and observation rendering.

This is the independent ground-truth side of the toolkit: a dense labeled
voxel world, a collision-free camera walk through it, and a renderer that
ray-marches the dense grid at a fine fixed step to produce per-pixel
features. The renderer deliberately shares no traversal code with the
sparse map, so end-to-end agreement between the two is meaningful
evidence rather than a tautology.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import GenerationError, MapFormatError, MapIOError
from .features import encode_label
from .geometry import CameraIntrinsics, Pose, pixel_rays, quat_from_matrix

__all__ = [
    "ObjectClassSpec",
    "SceneSpec",
    "DenseScene",
    "RenderedFrame",
    "generate_scene",
    "generate_trajectory",
    "render_observation",
    "render_frame",
    "scene_feature_cloud",
    "save_feature_image",
    "load_feature_image",
    "parse_scene_config",
    "parse_kv_file",
    "VOID_LABEL",
]

IMAGE_MAGIC = b"OMCI"
VOID_LABEL = "void"

_EMPTY = -1


@dataclass(frozen=True)
class ObjectClassSpec:
    label: str
    count: int
    size_min: float  # [m], per-dimension uniform range
    size_max: float
    height_min: Optional[float] = None  # default: the footprint range
    height_max: Optional[float] = None


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic multi-room indoor world."""

    extent: tuple[float, float, float] = (10.0, 10.0, 3.0)
    resolution: float = 0.05
    rooms: int = 1
    wall_thickness: float = 0.1
    door_width: float = 1.0
    ceiling: bool = True
    floor_tiles: float = 0.0   # random floor tile size [m]; 0 = plain floor
    wall_texture: float = 0.0  # random wall panel size [m]; 0 = uniform walls
    objects: tuple[ObjectClassSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("scene extent must be positive")
        if self.resolution <= 0:
            raise ValueError("scene resolution must be positive")
        if self.rooms < 1:
            raise ValueError("room count must be >= 1")


@dataclass
class DenseScene:
    """Dense labeled voxel grid; label index -1 means empty space."""

    grid: np.ndarray          # (nx, ny, nz) int16
    labels: list[str]
    resolution: float
    floor_height: float       # top of the floor slab [m]

    @property
    def shape(self):
        return self.grid.shape

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.grid.shape) * self.resolution

    def label_index(self, label: str) -> int:
        return self.labels.index(label)


def _cells(meters: float, res: float) -> int:
    return max(1, int(round(meters / res)))


def _room_grid(rooms: int) -> tuple[int, int]:
    rx = int(math.floor(math.sqrt(rooms)))
    while rooms % rx:
        rx -= 1
    return rx, rooms // rx


def generate_scene(spec: SceneSpec) -> DenseScene:
    """Deterministic multi-room world: floor, walls with doors, boxy objects.

    Object layouts that disconnect the free space are re-rolled; running
    out of retries raises GenerationError.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE17E]))
    res = spec.resolution
    nx, ny, nz = (_cells(e, res) for e in spec.extent)
    if nz < 3:
        raise GenerationError("scene too flat for floor plus free space")
    labels = ["floor", "wall"]
    label_of = {"floor": 0, "wall": 1}
    if spec.ceiling:
        label_of["ceiling"] = len(labels)
        labels.append("ceiling")
    if spec.floor_tiles > 0:
        for t in ("tile_a", "tile_b", "tile_c"):
            label_of[t] = len(labels)
            labels.append(t)
    if spec.wall_texture > 0:
        for t in ("panel", "trim"):
            label_of[t] = len(labels)
            labels.append(t)
    for oc in spec.objects:
        if oc.label not in label_of:
            label_of[oc.label] = len(labels)
            labels.append(oc.label)

    wt = _cells(spec.wall_thickness, res)
    door = _cells(spec.door_width, res)
    rx, ry = _room_grid(spec.rooms)

    for attempt in range(20):
        grid = np.full((nx, ny, nz), _EMPTY, dtype=np.int16)
        grid[:, :, 0] = 0  # floor slab
        if spec.floor_tiles > 0:
            # aperiodic random tiling: plain floor plus three tile classes
            tc = _cells(spec.floor_tiles, res)
            ntx, nty = nx // tc + 1, ny // tc + 1
            palette = np.array([0, label_of["tile_a"], label_of["tile_b"],
                                label_of["tile_c"]], dtype=np.int16)
            choice = palette[rng.integers(0, 4, (ntx, nty))]
            ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            grid[:, :, 0] = choice[ix // tc, iy // tc]
        if spec.ceiling:
            grid[:, :, nz - 1] = label_of["ceiling"]
        grid[:wt, :, 1:] = 1
        grid[-wt:, :, 1:] = 1
        grid[:, :wt, 1:] = 1
        grid[:, -wt:, 1:] = 1
        # interior walls with one full-height door gap per segment
        for i in range(1, rx):
            x0 = i * nx // rx
            for j in range(ry):
                y0, y1 = j * ny // ry, (j + 1) * ny // ry
                seg = y1 - y0
                if seg <= door + 2 * wt:
                    continue
                gap = wt + int(rng.integers(0, seg - door - 2 * wt + 1))
                grid[x0 : x0 + wt, y0 : y0 + gap, 1:] = 1
                grid[x0 : x0 + wt, y0 + gap + door : y1, 1:] = 1
        for j in range(1, ry):
            y0 = j * ny // ry
            for i in range(rx):
                x0, x1 = i * nx // rx, (i + 1) * nx // rx
                seg = x1 - x0
                if seg <= door + 2 * wt:
                    continue
                gap = wt + int(rng.integers(0, seg - door - 2 * wt + 1))
                grid[x0 : x0 + gap, y0 : y0 + wt, 1:] = 1
                grid[x0 + gap + door : x1, y0 : y0 + wt, 1:] = 1

        if spec.wall_texture > 0:
            # aperiodic panel/trim texture over every wall surface; diagonal
            # stripes cross both wall orientations
            wc = _cells(spec.wall_texture, res)
            palette = np.array([1, label_of["panel"], label_of["trim"]],
                               dtype=np.int16)
            s2d = np.add.outer(np.arange(nx), np.arange(ny)) // wc
            b1d = np.arange(nz) // wc
            pal = palette[rng.integers(0, 3, (int(s2d.max()) + 1, int(b1d.max()) + 1))]
            tex = pal[s2d[:, :, None], b1d[None, None, :]]
            walls = grid == 1
            grid[walls] = tex[walls]
            del s2d, b1d, tex, walls

        ok = True
        for oc in spec.objects:
            li = label_of[oc.label]
            for _ in range(oc.count):
                if not _place_object(grid, rng, li, oc, res, nz):
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        if _free_space_connected(grid):
            return DenseScene(grid, labels, res, floor_height=res)
    raise GenerationError("could not generate a connected scene within retries")


def _place_object(grid, rng, label_idx, oc: ObjectClassSpec, res, nz) -> bool:
    nx, ny, _ = grid.shape
    h_lo = oc.height_min if oc.height_min is not None else oc.size_min
    h_hi = oc.height_max if oc.height_max is not None else oc.size_max
    for _ in range(200):
        sx = _cells(rng.uniform(oc.size_min, oc.size_max), res)
        sy = _cells(rng.uniform(oc.size_min, oc.size_max), res)
        sz = _cells(rng.uniform(h_lo, h_hi), res)
        sz = min(sz, int(nz * 0.7))
        x = int(rng.integers(1, max(2, nx - sx - 1)))
        y = int(rng.integers(1, max(2, ny - sy - 1)))
        # one-cell free margin so objects never fuse with walls or each other
        region = grid[max(0, x - 1) : x + sx + 1, max(0, y - 1) : y + sy + 1, 1 : 1 + sz]
        if np.any(region != _EMPTY):
            continue
        grid[x : x + sx, y : y + sy, 1 : 1 + sz] = label_idx
        return True
    return False


def _free_space_connected(grid) -> bool:
    free = grid[:, :, 1:] == _EMPTY
    structure = ndimage.generate_binary_structure(3, 1)
    _, n = ndimage.label(free, structure=structure)
    return n == 1


def generate_trajectory(scene: DenseScene, steps: int, seed: int,
                        camera_height: float = 1.2, step_length: float = 0.13,
                        turn_sigma_deg: float = 10.0, pitch_deg: float = 12.0,
                        clearance: float = 0.25) -> list[Pose]:
    """Collision-free smooth random walk at fixed camera height.

    Consecutive poses average roughly ``step_length`` of translation and a
    half-normal heading change of scale ``turn_sigma_deg``; blocked steps
    re-roll the heading. The camera looks along its yaw with a fixed
    downward pitch.
    """
    if steps < 2:
        raise ValueError("trajectory needs at least 2 steps")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA7]))
    res = scene.resolution
    z_cell = min(int((scene.floor_height + camera_height) / res), scene.shape[2] - 1)
    occupied_2d = scene.grid[:, :, z_cell] != _EMPTY
    margin = max(1, int(round(clearance / res)))
    blocked = ndimage.binary_dilation(occupied_2d, iterations=margin)
    blocked[:margin, :] = True
    blocked[-margin:, :] = True
    blocked[:, :margin] = True
    blocked[:, -margin:] = True
    open_cells = np.argwhere(~blocked)
    if len(open_cells) == 0:
        raise GenerationError("no free space at camera height")

    start = open_cells[int(rng.integers(0, len(open_cells)))]
    pos = (start + 0.5) * res
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    z = scene.floor_height + camera_height
    pitch = math.radians(pitch_deg)

    def free(p) -> bool:
        cx, cy = int(p[0] / res), int(p[1] / res)
        if not (0 <= cx < blocked.shape[0] and 0 <= cy < blocked.shape[1]):
            return False
        return not blocked[cx, cy]

    # deviation ladder: prefer going straight, then the gentlest turn that
    # keeps a few steps of lookahead clear; paths sweep through rooms
    ladder = [0.0]
    for k in range(1, 13):
        ladder += [math.radians(15.0 * k), math.radians(-15.0 * k)]

    def steer(base: float) -> Optional[float]:
        for need_look in (True, False):
            for dev in ladder:
                cand = base + dev
                d = np.array([math.cos(cand), math.sin(cand)])
                nxt = pos + step_length * d
                look = pos + 4.0 * step_length * d
                if free(nxt) and (not need_look or free(look)):
                    return cand
        return None

    poses = []
    for _ in range(steps):
        poses.append(_camera_pose(pos[0], pos[1], z, heading, pitch))
        wander = float(rng.normal(0.0, math.radians(turn_sigma_deg)))
        cand = steer(heading + wander)
        if cand is None:
            heading += math.pi  # boxed in: turn around in place
            continue
        heading = cand
        pos = pos + step_length * np.array([math.cos(heading), math.sin(heading)])
    return poses


def _camera_pose(x, y, z, yaw, pitch) -> Pose:
    """Camera-to-world pose: +z optical axis along (yaw, pitch-down)."""
    f = np.array([math.cos(pitch) * math.cos(yaw),
                  math.cos(pitch) * math.sin(yaw),
                  -math.sin(pitch)])
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    m = np.stack([r, d, f], axis=1)
    return Pose(np.array([x, y, z]), quat_from_matrix(m))


@dataclass
class RenderedFrame:
    features: np.ndarray      # (H, W, F)
    points: np.ndarray        # (H, W, 3) world hit points (valid where hit)
    hit: np.ndarray           # (H, W) bool
    label_indices: np.ndarray  # (H, W) int, -1 where void


_ray_cache: dict = {}


def _camera_rays(intr: CameraIntrinsics) -> np.ndarray:
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    rays = _ray_cache.get(key)
    if rays is None:
        u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
        rays = pixel_rays(intr, np.stack([u.ravel(), v.ravel()], axis=1))
        _ray_cache[key] = rays
    return rays


def render_frame(scene: DenseScene, pose: Pose, intr: CameraIntrinsics,
                 encoder_seed: int, feature_noise_sigma: float,
                 rng: Optional[np.random.Generator] = None,
                 dim: int = 512) -> RenderedFrame:
    """Fine-step ray march through the dense grid (step = resolution/10).

    Per pixel, the feature is the encoded label of the first labeled cell
    plus optional isotropic Gaussian noise, renormalized; pixels whose ray
    leaves the scene get the encoded void label and no hit point.
    """
    if feature_noise_sigma > 0 and rng is None:
        raise ValueError("feature noise requires an rng")
    ext = scene.extent
    if np.any(pose.translation < 0) or np.any(pose.translation > ext):
        raise ValueError("camera pose outside scene bounds")
    res = scene.resolution
    h_step = res / 10.0
    dirs = _camera_rays(intr) @ pose.rotation_matrix().T
    npix = len(dirs)
    o = pose.translation

    # per-ray exit time from the scene box caps the march
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / np.where(dirs == 0.0, 1.0, dirs), np.inf)
    tf = np.maximum((0.0 - o) * inv, (ext - o) * inv)
    t_exit = np.where(np.isfinite(tf), tf, np.inf).min(axis=1)

    label_idx = np.full(npix, _EMPTY, dtype=np.int64)
    hit_t = np.zeros(npix)
    alive = np.arange(npix)
    t = np.zeros(npix)
    t_exit_a = t_exit
    dirs_a = dirs
    grid_flat = scene.grid.ravel()
    sx, sy, sz = scene.shape
    while len(alive):
        p = o + t[:, None] * dirs_a
        cell = np.floor_divide(p, res).astype(np.int64)
        inb = ((cell >= 0) & (cell < [sx, sy, sz])).all(axis=1)
        flat = (cell[:, 0] * sy + cell[:, 1]) * sz + cell[:, 2]
        lab = np.where(inb, grid_flat[np.where(inb, flat, 0)], _EMPTY)
        found = lab != _EMPTY
        if found.any():
            w = np.flatnonzero(found)
            label_idx[alive[w]] = lab[w]
            hit_t[alive[w]] = t[w]
        keep = ~found & (t <= t_exit_a)
        k = np.flatnonzero(keep)
        alive, t, dirs_a, t_exit_a = alive[k], t[k] + h_step, dirs_a[k], t_exit_a[k]

    hit = label_idx != _EMPTY
    points = o + hit_t[:, None] * dirs

    present = np.unique(label_idx[hit])
    table = {int(li): encode_label(scene.labels[int(li)], encoder_seed, dim)
             for li in present}
    table[_EMPTY] = encode_label(VOID_LABEL, encoder_seed, dim)
    rows = np.empty((npix, dim))
    for li, vec in table.items():
        rows[label_idx == li] = vec
    if feature_noise_sigma > 0:
        rows = rows + rng.normal(0.0, feature_noise_sigma, rows.shape)
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)

    hw = (intr.height, intr.width)
    return RenderedFrame(
        features=rows.reshape(hw + (dim,)),
        points=points.reshape(hw + (3,)),
        hit=hit.reshape(hw),
        label_indices=label_idx.reshape(hw).astype(np.int32),
    )


def render_observation(scene: DenseScene, pose: Pose, intr: CameraIntrinsics,
                       encoder_seed: int, feature_noise_sigma: float = 0.0,
                       rng: Optional[np.random.Generator] = None,
                       dim: int = 512) -> np.ndarray:
    """Per-pixel feature grid (H, W, F); see render_frame for semantics."""
    return render_frame(scene, pose, intr, encoder_seed, feature_noise_sigma,
                        rng, dim).features


def scene_feature_cloud(scene: DenseScene, encoder_seed: int, dim: int = 512,
                        chunk: int = 200000):
    """Yield (points, features) chunks covering every labeled cell.

    Cell centers paired with their exact label encodings: the point-cloud
    mapping input for a scene.
    """
    coords = np.argwhere(scene.grid != _EMPTY)
    labs = scene.grid[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.int64)
    table = np.stack([encode_label(l, encoder_seed, dim) for l in scene.labels])
    for s in range(0, len(coords), chunk):
        c = coords[s : s + chunk]
        yield (c + 0.5) * scene.resolution, table[labs[s : s + chunk]]


def save_feature_image(path, image: np.ndarray) -> None:
    """Binary exchange format: magic, u32 width/height/F, then f32 values.

    Values are row-major over (v, u, channel).
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"feature image must be (H, W, F), got {img.shape}")
    h, w, f = img.shape
    with open(path, "wb") as fp:
        fp.write(IMAGE_MAGIC)
        fp.write(struct.pack("<III", w, h, f))
        fp.write(img.astype("<f4").tobytes())


def load_feature_image(path) -> np.ndarray:
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != IMAGE_MAGIC:
            raise MapFormatError(f"bad magic {magic!r}, expected {IMAGE_MAGIC!r}")
        header = fp.read(12)
        if len(header) != 12:
            raise MapIOError("truncated feature-image header")
        w, h, f = struct.unpack("<III", header)
        raw = fp.read(4 * w * h * f)
        if len(raw) != 4 * w * h * f:
            raise MapIOError("truncated feature-image data")
        if fp.read(1):
            raise MapFormatError("trailing bytes after feature-image data")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, f).astype(np.float64)


# -- config files ---------------------------------------------------------


def parse_kv_file(path) -> list[tuple[str, str, int]]:
    """Key-value config lines: ``key = value``, # comments, blank lines."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{path}:{ln}: expected 'key = value', got {body!r}")
            key, value = body.split("=", 1)
            out.append((key.strip(), value.strip(), ln))
    return out


_SCENE_KEYS = {"extent", "resolution", "rooms", "wall_thickness", "door_width",
               "ceiling", "floor_tiles", "wall_texture", "seed", "object"}


def parse_scene_config(path) -> SceneSpec:
    """Build a SceneSpec from a key-value file; see README for the keys."""
    kwargs: dict = {}
    objects: list[ObjectClassSpec] = []
    for key, value, ln in parse_kv_file(path):
        where = f"{path}:{ln}: {key}"
        if key not in _SCENE_KEYS:
            raise ValueError(f"{where}: unknown scene key")
        try:
            if key == "extent":
                parts = [float(x) for x in value.split()]
                if len(parts) != 3:
                    raise ValueError("needs 3 values")
                kwargs["extent"] = tuple(parts)
            elif key in ("resolution", "wall_thickness", "door_width", "floor_tiles",
                         "wall_texture"):
                kwargs[key] = float(value)
            elif key in ("rooms", "seed"):
                kwargs[key] = int(value)
            elif key == "ceiling":
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError("expects true/false")
                kwargs[key] = value.lower() in ("true", "1")
            elif key == "object":
                parts = value.split()
                if len(parts) not in (4, 6):
                    raise ValueError(
                        "needs 'label count size_min size_max [height_min height_max]'")
                heights = (float(parts[4]), float(parts[5])) if len(parts) == 6 else (None, None)
                objects.append(ObjectClassSpec(parts[0], int(parts[1]),
                                               float(parts[2]), float(parts[3]),
                                               *heights))
        except ValueError as e:
            raise ValueError(f"{where}: {e}") from None
    return SceneSpec(objects=tuple(objects), **kwargs)
