"""The octree language map: sparse voxels indexing a feature database.

Voxels accumulate running-mean feature vectors while the map is being
built; finalization deduplicates those means into a FeatureDb and leaves
each voxel holding an entry index. Finalized maps are immutable, cheap to
share across workers, and support batched first-hit ray tracing via
incremental grid traversal accelerated by a chebyshev distance field
(rays skip across free space instead of stepping voxel by voxel).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import MapCorruptionError, MapFormatError, MapIOError, MapStateError
from .features import FeatureDb, FeatureDbBuilder, nearest_feature

__all__ = [
    "OctreeLanguageMap",
    "RayHit",
    "RayHits",
    "from_point_cloud",
    "save_map",
    "load_map",
    "save_feature_cloud",
    "load_feature_cloud",
]

MAP_MAGIC = b"OMCL"
MAP_VERSION = 1
CLOUD_HEADER_PREFIX = "OMCL-CLOUD F="

# packed voxel keys use 21 bits per axis
_KEY_OFF = 1 << 20
_PAD = 3  # absorbs traversal overshoot past the occupied bounding box


@dataclass(frozen=True)
class RayHit:
    """Outcome of tracing one ray; miss leaves the other fields None."""

    hit: bool
    voxel: Optional[tuple[int, int, int]] = None
    feature_index: Optional[int] = None
    range: Optional[float] = None


class RayHits:
    """Batched first-hit results; behaves as a sequence of RayHit.

    The underlying arrays (`hit`, `voxel`, `feature_index`, `ranges`) are
    the fast path; misses carry feature_index -1 and range +inf there.
    """

    def __init__(self, hit, voxel, feature_index, ranges):
        self.hit = hit
        self.voxel = voxel
        self.feature_index = feature_index
        self.ranges = ranges

    def __len__(self) -> int:
        return len(self.hit)

    def __getitem__(self, i: int) -> RayHit:
        if not self.hit[i]:
            return RayHit(False)
        return RayHit(
            True,
            tuple(int(c) for c in self.voxel[i]),
            int(self.feature_index[i]),
            float(self.ranges[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class _TraversalIndex:
    """Dense occupancy/index cache over the occupied bounding box.

    Arrays are padded by _PAD voxels per side so that traversal lookups
    one step past the box stay in bounds. `dist` holds the chebyshev
    distance (in voxels) to the nearest occupied voxel, 0 inside one.
    """

    def __init__(self, coords: np.ndarray, indices: np.ndarray):
        self.vlo = coords.min(axis=0).astype(np.int64)
        vhi = coords.max(axis=0).astype(np.int64)
        shape = vhi - self.vlo + 1 + 2 * _PAD
        if int(shape.prod()) > (1 << 28):
            raise MemoryError("occupied bounding box too large for the dense traversal cache")
        self.shape = shape
        local = coords - self.vlo + _PAD
        index = np.full(tuple(shape), -1, dtype=np.int32)
        index[local[:, 0], local[:, 1], local[:, 2]] = indices
        free = index < 0
        dist = ndimage.distance_transform_cdt(free, metric="chessboard")
        self.index_flat = index.ravel()
        self.dist_flat = np.minimum(dist, 30000).astype(np.int16).ravel()
        self.fsx = int(shape[1] * shape[2])
        self.fsy = int(shape[2])


class OctreeLanguageMap:
    """Sparse voxel grid of feature accumulators or feature indices.

    World point p lands in voxel floor((p - origin)/resolution) per axis.
    Before finalization each occupied voxel keeps the running mean of all
    features inserted into it; afterwards it stores an index into the
    attached FeatureDb.
    """

    def __init__(self, resolution: float, origin=(0.0, 0.0, 0.0)):
        if resolution <= 0:
            raise ValueError(f"resolution must be positive, got {resolution}")
        self.resolution = float(resolution)
        origin = np.asarray(origin, dtype=np.float64).reshape(3).copy()
        origin.flags.writeable = False
        self.origin = origin
        self.db: Optional[FeatureDb] = None
        self.skipped_nonfinite = 0
        # accumulation state
        self._rows: dict[int, int] = {}
        self._keys: list[int] = []
        self._sums: Optional[np.ndarray] = None
        self._counts: Optional[np.ndarray] = None
        self._n = 0
        self._dim: Optional[int] = None
        # finalized state
        self._finalized = False
        self._coords: Optional[np.ndarray] = None
        self._indices: Optional[np.ndarray] = None
        self._trav: Optional[_TraversalIndex] = None

    # -- shared queries ---------------------------------------------------

    @property
    def finalized(self) -> bool:
        return self._finalized

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    def __len__(self) -> int:
        return len(self._coords) if self._finalized else self._n

    def grid_coords(self, points) -> np.ndarray:
        """Integer voxel coordinates of world points (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - self.origin) / self.resolution).astype(np.int64)

    def voxel_centers(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return self.origin + (c + 0.5) * self.resolution

    # -- construction -----------------------------------------------------

    def _pack(self, coords: np.ndarray) -> np.ndarray:
        if np.any(np.abs(coords) >= _KEY_OFF):
            raise ValueError("point coordinates exceed the supported map extent")
        return (
            ((coords[:, 0] + _KEY_OFF) << 42)
            | ((coords[:, 1] + _KEY_OFF) << 21)
            | (coords[:, 2] + _KEY_OFF)
        )

    @staticmethod
    def _unpack(keys: np.ndarray) -> np.ndarray:
        out = np.empty((len(keys), 3), dtype=np.int64)
        out[:, 0] = (keys >> 42) - _KEY_OFF
        out[:, 1] = ((keys >> 21) & ((1 << 21) - 1)) - _KEY_OFF
        out[:, 2] = (keys & ((1 << 21) - 1)) - _KEY_OFF
        return out

    def _grow(self, needed: int) -> None:
        cap = 0 if self._sums is None else len(self._sums)
        if self._n + needed <= cap:
            return
        new_cap = max(1024, cap * 2, self._n + needed)
        sums = np.zeros((new_cap, self._dim), dtype=np.float64)
        counts = np.zeros(new_cap, dtype=np.int64)
        if self._n:
            sums[: self._n] = self._sums[: self._n]
            counts[: self._n] = self._counts[: self._n]
        self._sums = sums
        self._counts = counts

    def integrate_frame(self, points, features) -> None:
        """Fold world-frame points and their features into voxel means.

        Non-finite rows are skipped and counted in `skipped_nonfinite`.
        """
        if self._finalized:
            raise MapStateError("cannot integrate into a finalized map")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(features, dtype=np.float64)
        feats = feats.reshape(-1, feats.shape[-1])
        if len(pts) != len(feats):
            raise ValueError(f"points and features differ in length: {len(pts)} vs {len(feats)}")
        if self._dim is None:
            self._dim = feats.shape[1]
        elif feats.shape[1] != self._dim:
            raise ValueError(f"feature dimension {feats.shape[1]} != map dimension {self._dim}")
        ok = np.isfinite(pts).all(axis=1) & np.isfinite(feats).all(axis=1)
        nbad = len(pts) - int(ok.sum())
        if nbad:
            self.skipped_nonfinite += nbad
            pts, feats = pts[ok], feats[ok]
        if len(pts) == 0:
            return

        keys = self._pack(self.grid_coords(pts))
        uq, inv = np.unique(keys, return_inverse=True)
        bsums = np.zeros((len(uq), self._dim), dtype=np.float64)
        np.add.at(bsums, inv, feats)
        bcounts = np.bincount(inv, minlength=len(uq))

        rows = np.empty(len(uq), dtype=np.int64)
        fresh = 0
        for i, k in enumerate(uq.tolist()):
            r = self._rows.get(k)
            if r is None:
                fresh += 1
                r = self._n + fresh - 1
                self._rows[k] = r
                self._keys.append(k)
            rows[i] = r
        if fresh:
            self._grow(fresh)
            self._n += fresh
        self._sums[rows] += bsums
        self._counts[rows] += bcounts

    def finalize(self, tau: float) -> FeatureDb:
        """Deduplicate voxel means into a FeatureDb and freeze the map.

        Means are renormalized to unit length and streamed into the
        greedy database builder in lexicographic voxel-key order (the
        greedy result is order-dependent, so the order is pinned).
        Voxels whose mean is numerically zero are dropped.
        """
        if self._finalized:
            raise MapStateError("map is already finalized")
        if self._n == 0:
            self._set_finalized(
                np.zeros((0, 3), dtype=np.int32),
                np.zeros(0, dtype=np.int32),
                FeatureDb(np.zeros((0, self._dim or 0), dtype=np.float32), tau,
                          dim=self._dim or 0),
            )
            return self.db

        keys = np.array(self._keys, dtype=np.int64)
        order = np.argsort(keys)  # packed keys sort lexicographically by (x, y, z)
        means = self._sums[: self._n][order] / self._counts[: self._n][order, None]
        norms = np.linalg.norm(means, axis=1)
        keep = norms >= 1e-8
        means = means[keep] / norms[keep, None]
        coords = self._unpack(keys[order][keep]).astype(np.int32)

        builder = FeatureDbBuilder(tau, dim=self._dim)
        indices = np.zeros(len(means), dtype=np.int32)
        chunk = 8192
        for s in range(0, len(means), chunk):
            indices[s : s + chunk] = builder.add_many(means[s : s + chunk])
        self._set_finalized(coords, indices, builder.finish())
        return self.db

    def _set_finalized(self, coords: np.ndarray, indices: np.ndarray, db: FeatureDb) -> None:
        self._finalized = True
        self._coords = coords
        self._indices = indices
        self.db = db
        self._dim = db.dim
        self._rows = {}
        self._keys = []
        self._sums = None
        self._counts = None
        self._trav = _TraversalIndex(coords, indices) if len(coords) else None

    # -- finalized accessors ------------------------------------------------

    def _require_finalized(self):
        if not self._finalized:
            raise MapStateError("operation requires a finalized map")

    @property
    def voxel_coords(self) -> np.ndarray:
        """(M, 3) int32 grid coordinates, lexicographically sorted."""
        self._require_finalized()
        v = self._coords.view()
        v.flags.writeable = False
        return v

    @property
    def voxel_feature_indices(self) -> np.ndarray:
        self._require_finalized()
        v = self._indices.view()
        v.flags.writeable = False
        return v

    def accumulator(self, coord) -> tuple[np.ndarray, int]:
        """(mean, count) of one voxel while the map is unfinalized."""
        if self._finalized:
            raise MapStateError("accumulators are dropped at finalization")
        key = int(self._pack(np.asarray(coord, dtype=np.int64).reshape(1, 3))[0])
        row = self._rows.get(key)
        if row is None:
            raise KeyError(f"voxel {tuple(coord)} is empty")
        return self._sums[row] / self._counts[row], int(self._counts[row])

    def apply_grounding_remap(self, remap: Sequence[Optional[int]],
                              grounded_db: FeatureDb) -> "OctreeLanguageMap":
        """Re-index every voxel through ``remap``; absent entries drop voxels."""
        self._require_finalized()
        if len(remap) != len(self.db):
            raise ValueError(f"remap length {len(remap)} != database size {len(self.db)}")
        if len(self._indices) and int(self._indices.max()) >= len(remap):
            raise MapCorruptionError("map references entries beyond the remap")
        lut = np.full(len(remap), -1, dtype=np.int64)
        for i, r in enumerate(remap):
            if r is not None:
                if not 0 <= r < len(grounded_db):
                    raise MapCorruptionError(f"remap[{i}]={r} outside the grounded database")
                lut[i] = r
        mapped = lut[self._indices] if len(self._indices) else np.zeros(0, dtype=np.int64)
        keep = mapped >= 0
        out = OctreeLanguageMap(self.resolution, self.origin)
        out._dim = grounded_db.dim
        out._set_finalized(
            self._coords[keep].copy(),
            mapped[keep].astype(np.int32),
            grounded_db,
        )
        return out

    # -- ray tracing --------------------------------------------------------

    def raytrace_first_hit(self, origin, directions, max_range: float) -> RayHits:
        """First occupied voxel along each ray from a common origin.

        Directions must be unit-norm. A ray starting inside an occupied
        voxel hits it at range 0; rays that leave the map or exceed
        ``max_range`` miss. Boundary ties advance x, then y, then z.
        """
        self._require_finalized()
        o = np.asarray(origin, dtype=np.float64).reshape(3)
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if d.shape[-1] != 3:
            raise ValueError(f"directions must be (n, 3), got {d.shape}")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("ray directions must be unit-norm")
        origins = np.broadcast_to(o, d.shape)
        hit, flat, t = self._trace_batch(origins, d, float(max_range))
        return self._hits_from_flat(hit, flat, t)

    def _hits_from_flat(self, hit, flat, t) -> RayHits:
        voxel = np.zeros((len(hit), 3), dtype=np.int32)
        index = np.full(len(hit), -1, dtype=np.int32)
        if self._trav is not None and hit.any():
            tr = self._trav
            h = np.flatnonzero(hit)
            f = flat[h]
            vx = f // tr.fsx
            rem = f - vx * tr.fsx
            vy = rem // tr.fsy
            vz = rem - vy * tr.fsy
            voxel[h, 0] = vx + tr.vlo[0] - _PAD
            voxel[h, 1] = vy + tr.vlo[1] - _PAD
            voxel[h, 2] = vz + tr.vlo[2] - _PAD
            index[h] = tr.index_flat[f]
        return RayHits(hit, voxel, index, t)

    def _trace_batch(self, origins: np.ndarray, dirs: np.ndarray, max_range: float,
                     skip_min: int = 3):
        """Vectorized traversal core; assumes unit directions.

        Returns (hit mask, padded flat voxel id, entry range) per ray.
        Each iteration advances every live ray one voxel boundary, except
        where the distance field proves a safe multi-voxel skip.
        """
        R = len(dirs)
        hit = np.zeros(R, dtype=bool)
        hit_flat = np.zeros(R, dtype=np.int64)
        hit_t = np.full(R, np.inf)
        tr = self._trav
        if tr is None or R == 0:
            return hit, hit_flat, hit_t
        err = np.seterr(invalid="ignore", divide="ignore")  # masked inf lanes
        try:
            return self._trace_batch_inner(origins, dirs, max_range, skip_min,
                                           hit, hit_flat, hit_t)
        finally:
            np.seterr(**err)

    def _trace_batch_inner(self, origins, dirs, max_range, skip_min, hit, hit_flat, hit_t):
        tr = self._trav
        res = self.resolution
        o = origins + (1e-9 * res) * dirs  # escape exact-boundary starts
        inv = np.where(dirs != 0.0, 1.0 / np.where(dirs == 0.0, 1.0, dirs), np.inf)

        # clip to the padded-by-1 occupied box so empty space outside costs nothing
        lo = self.origin + (tr.vlo - 1) * res
        hi = self.origin + (tr.vlo - 2 * _PAD + tr.shape + 1) * res
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        zero = dirs == 0.0
        if zero.any():
            inside0 = (o >= lo) & (o <= hi)
            tn = np.where(zero, np.where(inside0, -np.inf, np.inf), tn)
            tf = np.where(zero, np.where(inside0, np.inf, -np.inf), tf)
        t_entry = np.maximum(tn.max(axis=1), 0.0)
        t_exit = tf.min(axis=1)
        t_end = np.minimum(t_exit, max_range)

        idx = np.flatnonzero(t_entry <= t_end)
        if len(idx) == 0:
            return hit, hit_flat, hit_t

        d = dirs[idx]
        o = o[idx]
        tc = t_entry[idx]
        tend = t_end[idx]
        texit = t_exit[idx]
        skip_per = res / np.abs(d).max(axis=1)
        ox, oy, oz = o[:, 0], o[:, 1], o[:, 2]
        dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
        ivx, ivy, ivz = inv[idx, 0], inv[idx, 1], inv[idx, 2]
        sx = np.where(dx > 0, 1, -1)
        sy = np.where(dy > 0, 1, -1)
        sz = np.where(dz > 0, 1, -1)
        tdx = np.where(np.isfinite(ivx), np.abs(ivx) * res, np.inf)
        tdy = np.where(np.isfinite(ivy), np.abs(ivy) * res, np.inf)
        tdz = np.where(np.isfinite(ivz), np.abs(ivz) * res, np.inf)
        O = self.origin
        vlo = tr.vlo
        nsh = tr.shape - 2 * _PAD  # occupied box extent in voxels
        fsx, fsy = tr.fsx, tr.fsy
        dist_flat = tr.dist_flat

        def sync(t_at):
            """Voxel state (clipped to the padded box) at ray time t_at."""
            px = ox + t_at * dx
            py = oy + t_at * dy
            pz = oz + t_at * dz
            vx = np.floor((px - O[0]) / res).astype(np.int64) - vlo[0]
            vy = np.floor((py - O[1]) / res).astype(np.int64) - vlo[1]
            vz = np.floor((pz - O[2]) / res).astype(np.int64) - vlo[2]
            np.clip(vx, -1, nsh[0], out=vx)
            np.clip(vy, -1, nsh[1], out=vy)
            np.clip(vz, -1, nsh[2], out=vz)
            tmx = ((vx + vlo[0] + (sx > 0)) * res + O[0] - ox) * ivx
            tmy = ((vy + vlo[1] + (sy > 0)) * res + O[1] - oy) * ivy
            tmz = ((vz + vlo[2] + (sz > 0)) * res + O[2] - oz) * ivz
            tmx = np.where(np.isfinite(tmx), tmx, np.inf)
            tmy = np.where(np.isfinite(tmy), tmy, np.inf)
            tmz = np.where(np.isfinite(tmz), tmz, np.inf)
            flat = ((vx + _PAD) * fsx) + ((vy + _PAD) * fsy) + (vz + _PAD)
            return flat, tmx, tmy, tmz

        # initial state at the box entry point
        flat, tmx, tmy, tmz = sync(tc)
        fstepx = sx * fsx
        fstepy = sy * fsy
        fstepz = sz

        c = dist_flat[flat]
        h0 = c == 0
        if h0.any():
            w = np.flatnonzero(h0)
            hit[idx[w]] = True
            hit_flat[idx[w]] = flat[w]
            hit_t[idx[w]] = tc[w]
        live = ~h0
        nlive = int(np.count_nonzero(live))
        n_at_compact = len(idx)
        while nlive:
            skip = live & (c >= skip_min)
            if skip.any():
                # chebyshev distance c proves the next c-1 voxels along the
                # ray are free; a jump proven free past the ray's end means
                # no hit at all, otherwise jump there and resynchronize
                target = tc + (c - 1) * skip_per
                done = skip & (target > tend)
                live = live & ~done
                skip = skip & ~done
                tnew = np.where(skip, target, tc)
                nflat, ntmx, ntmy, ntmz = sync(tnew)
                tmx = np.where(skip, ntmx, tmx)
                tmy = np.where(skip, ntmy, tmy)
                tmz = np.where(skip, ntmz, tmz)
                flat = np.where(skip, nflat, flat)
                tc = tnew
            ax_x = (tmx <= tmy) & (tmx <= tmz)
            ax_y = ~ax_x & (tmy <= tmz)
            ax_z = ~ax_x & ~ax_y
            t_enter = np.where(ax_x, tmx, np.where(ax_y, tmy, tmz))
            move = np.where(ax_x, fstepx, np.where(ax_y, fstepy, fstepz))
            flat = flat + np.where(live, move, 0)
            np.clip(flat, 0, dist_flat.size - 1, out=flat)  # corner cells are pad, never occupied
            tmx = np.where(ax_x, tmx + tdx, tmx)
            tmy = np.where(ax_y, tmy + tdy, tmy)
            tmz = np.where(ax_z, tmz + tdz, tmz)
            tc = np.where(live, t_enter, tc)
            # reaching the box exit time means the pad ring: free by
            # construction, so >= is safe and stops boundary-exact chains
            over = (t_enter > tend) | (t_enter >= texit)
            c = dist_flat[flat]
            found = (c == 0) & ~over & live
            w = np.flatnonzero(found)
            if len(w):
                hit[idx[w]] = True
                hit_flat[idx[w]] = flat[w]
                hit_t[idx[w]] = t_enter[w]
            live = live & ~found & ~over
            nlive = int(np.count_nonzero(live))
            if nlive and nlive < 0.7 * n_at_compact:
                k = np.flatnonzero(live)
                idx = idx[k]
                ox, oy, oz = ox[k], oy[k], oz[k]
                dx, dy, dz = dx[k], dy[k], dz[k]
                ivx, ivy, ivz = ivx[k], ivy[k], ivz[k]
                sx, sy, sz = sx[k], sy[k], sz[k]
                tdx, tdy, tdz = tdx[k], tdy[k], tdz[k]
                tmx, tmy, tmz = tmx[k], tmy[k], tmz[k]
                fstepx, fstepy, fstepz = fstepx[k], fstepy[k], fstepz[k]
                flat, tc, tend, texit = flat[k], tc[k], tend[k], texit[k]
                skip_per = skip_per[k]
                c = c[k]
                live = np.ones(nlive, dtype=bool)
                n_at_compact = nlive
        return hit, hit_flat, hit_t

    # -- projections ----------------------------------------------------------

    def project_floorplan(self) -> "OctreeLanguageMap":
        """Collapse each occupied (x, y) column into one voxel at height 0.

        The column voxel stores the index of the database entry closest
        (by cosine) to the renormalized mean of the column's entry
        vectors; the output shares this map's database.
        """
        self._require_finalized()
        if self.db is None:
            raise MapStateError("floor-plan projection requires an attached database")
        out = OctreeLanguageMap(self.resolution, self.origin)
        out._dim = self.db.dim
        if len(self._coords) == 0:
            out._set_finalized(np.zeros((0, 3), dtype=np.int32),
                               np.zeros(0, dtype=np.int32), self.db)
            return out
        cols = self._coords[:, 0].astype(np.int64) * (1 << 32) + (
            self._coords[:, 1].astype(np.int64) + (1 << 31)
        )
        order = np.argsort(cols, kind="stable")
        sorted_cols = cols[order]
        starts = np.flatnonzero(np.concatenate([[True], sorted_cols[1:] != sorted_cols[:-1]]))
        vecs = self.db.matrix[self._indices[order]]
        sums = np.add.reduceat(vecs, starts, axis=0)
        norms = np.linalg.norm(sums, axis=1)
        sims = (sums / np.where(norms[:, None] < 1e-8, 1.0, norms[:, None])) @ self.db.matrix.T
        col_idx = sims.argmax(axis=1).astype(np.int32)
        # degenerate cancelled columns fall back to their lowest voxel's entry
        bad = np.flatnonzero(norms < 1e-8)
        if len(bad):
            col_idx[bad] = self._indices[order[starts[bad]]]
        ends = np.concatenate([starts[1:], [len(order)]])
        first = order[starts]
        coords = np.zeros((len(starts), 3), dtype=np.int32)
        coords[:, 0] = self._coords[first, 0]
        coords[:, 1] = self._coords[first, 1]
        del ends
        reorder = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        out._set_finalized(coords[reorder], col_idx[reorder], self.db)
        return out

    # -- equality ---------------------------------------------------------------

    def equivalent_to(self, other: "OctreeLanguageMap") -> bool:
        """Bit-exact comparison of everything the map file persists."""
        if not (self._finalized and other._finalized):
            raise MapStateError("equivalence is defined for finalized maps")
        return (
            self.resolution == other.resolution
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self._coords, other._coords)
            and np.array_equal(self._indices, other._indices)
            and self.db == other.db
        )

    # -- serialization ------------------------------------------------------------

    def save(self, path) -> None:
        """Write the binary map format (see README for the layout)."""
        self._require_finalized()
        db = self.db
        with open(path, "wb") as f:
            f.write(MAP_MAGIC)
            f.write(struct.pack("<I", MAP_VERSION))
            f.write(struct.pack("<d", self.resolution))
            f.write(struct.pack("<3d", *self.origin))
            f.write(struct.pack("<II", db.dim, len(db)))
            for i in range(len(db)):
                label = db.labels[i] if db.labels is not None else None
                raw = (label or "").encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(db.entries[i].astype("<f4").tobytes())
            f.write(struct.pack("<Q", len(self._coords)))
            rec = np.empty(len(self._coords), dtype=[("c", "<i4", 3), ("i", "<u4")])
            rec["c"] = self._coords
            rec["i"] = self._indices
            f.write(rec.tobytes())


def save_map(map_: OctreeLanguageMap, path) -> None:
    map_.save(path)


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise MapIOError(f"truncated map file while reading {what}")
    return raw


def load_map(path) -> OctreeLanguageMap:
    """Read a map written by save_map; the round trip is bit-exact."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAP_MAGIC:
            raise MapFormatError(f"bad magic {magic!r}, expected {MAP_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != MAP_VERSION:
            raise MapFormatError(f"unsupported map version {version}")
        (resolution,) = struct.unpack("<d", _read_exact(f, 8, "resolution"))
        origin = struct.unpack("<3d", _read_exact(f, 24, "origin"))
        dim, n_db = struct.unpack("<II", _read_exact(f, 8, "database header"))
        entries = np.empty((n_db, dim), dtype=np.float32)
        labels: list[Optional[str]] = []
        for i in range(n_db):
            (llen,) = struct.unpack("<H", _read_exact(f, 2, "label length"))
            labels.append(_read_exact(f, llen, "label").decode("utf-8") if llen else None)
            entries[i] = np.frombuffer(_read_exact(f, 4 * dim, "entry values"), dtype="<f4")
        (n_vox,) = struct.unpack("<Q", _read_exact(f, 8, "voxel count"))
        rec = np.frombuffer(
            _read_exact(f, n_vox * 16, "voxel records"),
            dtype=[("c", "<i4", 3), ("i", "<u4")],
        )
        extra = f.read(1)
        if extra:
            raise MapFormatError("trailing bytes after voxel records")
    if len(rec) and int(rec["i"].max()) >= n_db:
        raise MapCorruptionError("voxel references an entry beyond the database")
    db = FeatureDb(entries, 0.0, labels=labels if any(l is not None for l in labels) else None,
                   dim=dim, _skip_check=True)
    m = OctreeLanguageMap(resolution, origin)
    m._dim = dim
    m._set_finalized(
        rec["c"].astype(np.int32).reshape(-1, 3).copy(),
        rec["i"].astype(np.int32).copy(),
        db,
    )
    return m


def from_point_cloud(points, features, resolution: float, origin=(0.0, 0.0, 0.0),
                     chunk: int = 65536) -> OctreeLanguageMap:
    """Unfinalized map holding the per-voxel mean features of a cloud."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud must be nonempty")
    feats = np.asarray(features, dtype=np.float64)
    m = OctreeLanguageMap(resolution, origin)
    for s in range(0, len(pts), chunk):
        m.integrate_frame(pts[s : s + chunk], feats[s : s + chunk])
    return m


def save_feature_cloud(path, points, features) -> None:
    """Text exchange format: header ``OMCL-CLOUD F=<F>``, then x y z f1..fF."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(features, dtype=np.float64)
    if len(pts) != len(feats):
        raise ValueError("points and features differ in length")
    with open(path, "w", encoding="ascii") as f:
        f.write(f"{CLOUD_HEADER_PREFIX}{feats.shape[1]}\n")
        block = np.concatenate([pts, feats], axis=1)
        for row in block:
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_feature_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if not header.startswith(CLOUD_HEADER_PREFIX):
            raise MapFormatError(f"bad feature-cloud header: {header!r}")
        try:
            dim = int(header[len(CLOUD_HEADER_PREFIX):])
        except ValueError:
            raise MapFormatError(f"bad feature-cloud header: {header!r}") from None
        try:
            data = np.loadtxt(f, dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise MapFormatError(f"malformed feature-cloud row: {e}") from None
    if data.size == 0:
        return np.zeros((0, 3)), np.zeros((0, dim))
    if data.shape[1] != 3 + dim:
        raise MapFormatError(
            f"feature-cloud rows have {data.shape[1]} fields, expected {3 + dim}"
        )
    return data[:, :3].copy(), data[:, 3:].copy()
