"""Block-hashed TSDF grid, bundled raycasting and surface extraction.

Storage is a pool of 16^3-voxel blocks. A dict maps integer block coordinates
to pool slots; blocks are allocated only where a ray's truncation band passes.
Each voxel holds a truncated signed distance, a weight and a label
probability vector.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .geometry import Pose
from .mesher import TriangleMesh
from .semantics import DEFAULT_NUM_CLASSES, most_likely_label

logger = logging.getLogger(__name__)

BLOCK = 16
BLOCK_VOXELS = BLOCK**3
_OFF = 1 << 20  # packs signed voxel coordinates into one int64


def _pack(keys: np.ndarray) -> np.ndarray:
    k = keys.astype(np.int64) + _OFF
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def _unpack(codes: np.ndarray) -> np.ndarray:
    mask = (1 << 21) - 1
    return np.stack([(codes >> 42) & mask, (codes >> 21) & mask, codes & mask], axis=1) - _OFF


@dataclass
class LabeledPointCloud:
    pose: Pose
    points: np.ndarray
    labels: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")
        if self.frame not in ("world", "sensor"):
            raise ValueError("frame must be 'world' or 'sensor'")

    def world_points(self) -> np.ndarray:
        return self.points if self.frame == "world" else self.pose.act(self.points)


class VoxelGrid:
    def __init__(self, voxel_size: float = 0.10, truncation_distance: float = 0.40, max_weight: float = 1e4,
                 num_classes: int = DEFAULT_NUM_CLASSES, min_weight: float = 1e-4):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if truncation_distance < 2 * voxel_size:
            raise ValueError("truncation_distance must be at least two voxels")
        self.voxel_size = float(voxel_size)
        self.truncation_distance = float(truncation_distance)
        self.max_weight = float(max_weight)
        self.num_classes = int(num_classes)
        self.min_weight = float(min_weight)
        self._slot: dict[int, int] = {}
        self._keys: list[int] = []
        self._distance = np.zeros((0, BLOCK_VOXELS))
        self._weight = np.zeros((0, BLOCK_VOXELS))
        self._probs = np.zeros((0, BLOCK_VOXELS, self.num_classes))
        self.skipped_points = 0

    # ------------------------------------------------------------ storage

    @property
    def n_blocks(self) -> int:
        return len(self._keys)

    def block_keys(self) -> np.ndarray:
        return _unpack(np.array(self._keys, dtype=np.int64)) if self._keys else np.zeros((0, 3), dtype=np.int64)

    def _grow(self, need: int) -> None:
        cap = self._distance.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap, 8)
        pad = new - cap
        self._distance = np.concatenate([self._distance, np.zeros((pad, BLOCK_VOXELS))])
        self._weight = np.concatenate([self._weight, np.zeros((pad, BLOCK_VOXELS))])
        uniform = np.full((pad, BLOCK_VOXELS, self.num_classes), 1.0 / self.num_classes)
        self._probs = np.concatenate([self._probs, uniform])

    def _flat_index(self, keys: np.ndarray, allocate: bool) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if not len(keys):
            return np.zeros(0, dtype=np.int64)
        bcodes = _pack(keys >> 4)
        local = ((keys[:, 0] & 15) * BLOCK + (keys[:, 1] & 15)) * BLOCK + (keys[:, 2] & 15)
        uniq, inv = np.unique(bcodes, return_inverse=True)
        slots = np.empty(len(uniq), dtype=np.int64)
        for i, code in enumerate(uniq.tolist()):
            s = self._slot.get(code)
            if s is None:
                if not allocate:
                    slots[i] = -1
                    continue
                s = len(self._keys)
                self._slot[code] = s
                self._keys.append(code)
            slots[i] = s
        if allocate:
            self._grow(len(self._keys))
        slot = slots[inv.reshape(-1)]
        return np.where(slot >= 0, slot * BLOCK_VOXELS + local, -1)

    def _gather(self, arr: np.ndarray, keys, default):
        flat = self._flat_index(keys, allocate=False)
        view = arr.reshape(-1, *arr.shape[2:])
        out = np.empty((len(flat),) + arr.shape[2:])
        out[...] = default
        hit = flat >= 0
        out[hit] = view[flat[hit]]
        return out

    def get_distance(self, keys) -> np.ndarray:
        return self._gather(self._distance, keys, 0.0)

    def get_weight(self, keys) -> np.ndarray:
        return self._gather(self._weight, keys, 0.0)

    def get_probs(self, keys) -> np.ndarray:
        return self._gather(self._probs, keys, 1.0 / self.num_classes)

    def set_tsdf(self, keys, distance, weight) -> None:
        flat = self._flat_index(keys, allocate=True)
        self._distance.reshape(-1)[flat] = distance
        self._weight.reshape(-1)[flat] = weight

    def set_probs(self, keys, probs) -> None:
        flat = self._flat_index(keys, allocate=True)
        self._probs.reshape(-1, self.num_classes)[flat] = probs

    def voxel_of(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def voxel_center(self, keys) -> np.ndarray:
        return (np.asarray(keys, dtype=float) + 0.5) * self.voxel_size

    def observed_voxels(self) -> np.ndarray:
        """Keys of every voxel with non-zero weight."""
        n = self.n_blocks
        if not n:
            return np.zeros((0, 3), dtype=np.int64)
        slot, local = np.nonzero(self._weight[:n] > 0)
        base = self.block_keys()[slot] * BLOCK
        lx, rem = np.divmod(local, BLOCK * BLOCK)
        ly, lz = np.divmod(rem, BLOCK)
        return base + np.stack([lx, ly, lz], axis=1)

    def dense(self):
        """Dense copies of distance, weight over the bounding box of allocated blocks.

        Returns (origin voxel key, distance, weight); unallocated voxels carry
        distance = truncation and weight 0.
        """
        n = self.n_blocks
        if not n:
            return np.zeros(3, dtype=np.int64), np.zeros((0, 0, 0)), np.zeros((0, 0, 0))
        bk = self.block_keys()
        bmin = bk.min(axis=0)
        shape = tuple(((bk.max(axis=0) - bmin + 1) * BLOCK).tolist())
        dist = np.full(shape, self.truncation_distance)
        wt = np.zeros(shape)
        for s, b in enumerate(bk - bmin):
            sl = tuple(slice(int(c) * BLOCK, (int(c) + 1) * BLOCK) for c in b)
            dist[sl] = self._distance[s].reshape(BLOCK, BLOCK, BLOCK)
            wt[sl] = self._weight[s].reshape(BLOCK, BLOCK, BLOCK)
        return bmin * BLOCK, dist, wt

    # ------------------------------------------------------------ binary dump

    _MAGIC = b"MSTSDF1\x00"

    def save(self, path) -> None:
        """Little-endian dump: magic, voxel_size, truncation, max_weight (f8), K, n_blocks (u4),
        then per block: 3 x i4 block coords, 4096 f8 distances, 4096 f8 weights,
        4096*K f8 probabilities, voxels in (x, y, z) row-major order."""
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<dddII", self.voxel_size, self.truncation_distance, self.max_weight,
                                self.num_classes, self.n_blocks))
            for s, key in enumerate(self.block_keys()):
                f.write(struct.pack("<iii", *[int(k) for k in key]))
                f.write(self._distance[s].astype("<f8").tobytes())
                f.write(self._weight[s].astype("<f8").tobytes())
                f.write(self._probs[s].astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> VoxelGrid:
        data = Path(path).read_bytes()
        if data[:8] != cls._MAGIC:
            raise ValueError("not a TSDF grid dump")
        vs, tr, mw, K, n = struct.unpack_from("<dddII", data, 8)
        grid = cls(vs, tr, mw, K)
        off = 8 + struct.calcsize("<dddII")
        keys = []
        grid._grow(n)
        for s in range(n):
            keys.append(struct.unpack_from("<iii", data, off))
            off += 12
            for arr, count in ((grid._distance, BLOCK_VOXELS), (grid._weight, BLOCK_VOXELS)):
                arr[s] = np.frombuffer(data, "<f8", count, off)
                off += 8 * count
            grid._probs[s] = np.frombuffer(data, "<f8", BLOCK_VOXELS * K, off).reshape(BLOCK_VOXELS, K)
            off += 8 * BLOCK_VOXELS * K
        codes = _pack(np.array(keys, dtype=np.int64).reshape(-1, 3)).tolist()
        grid._keys = codes
        grid._slot = {c: i for i, c in enumerate(codes)}
        return grid


# ---------------------------------------------------------------- bundling

class Bundle(NamedTuple):
    voxel: np.ndarray
    members: np.ndarray
    endpoint: np.ndarray


@dataclass
class Bundles:
    """Points grouped by the voxel containing them, one representative ray each."""

    origin: np.ndarray
    voxels: np.ndarray  # (B, 3) endpoint voxel keys
    endpoints: np.ndarray  # (B, 3) member centroids
    sizes: np.ndarray  # (B,)
    point_index: np.ndarray  # original indices of the finite points
    bundle_of_point: np.ndarray  # bundle id per finite point
    labels: np.ndarray  # label per finite point
    skipped: int = 0

    def __len__(self):
        return len(self.sizes)

    def members(self, b: int) -> np.ndarray:
        return self.point_index[self.bundle_of_point == b]

    def __iter__(self) -> Iterator[Bundle]:
        order = np.argsort(self.bundle_of_point, kind="stable")
        splits = np.cumsum(self.sizes)[:-1]
        for b, idx in enumerate(np.split(self.point_index[order], splits)):
            yield Bundle(self.voxels[b], idx, self.endpoints[b])

    def __getitem__(self, b: int) -> Bundle:
        return Bundle(self.voxels[b], self.members(b), self.endpoints[b])


def bundle_points(cloud: LabeledPointCloud, grid: VoxelGrid) -> Bundles:
    pts = cloud.world_points()
    finite = np.all(np.isfinite(pts), axis=1)
    idx = np.flatnonzero(finite)
    pts = pts[idx]
    keys = grid.voxel_of(pts)
    codes, inv, counts = np.unique(_pack(keys), return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(codes), 3))
    np.add.at(sums, inv, pts)
    return Bundles(
        origin=cloud.pose.t.copy(),
        voxels=_unpack(codes),
        endpoints=sums / counts[:, None],
        sizes=counts,
        point_index=idx,
        bundle_of_point=inv,
        labels=cloud.labels[idx],
        skipped=int((~finite).sum()),
    )


# ---------------------------------------------------------------- integration

@dataclass
class IntegrationRecord:
    """Which voxels one integrate call updated, and from which bundle."""

    bundles: Bundles
    voxels: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    bundle: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sdf: np.ndarray = field(default_factory=lambda: np.zeros(0))


def traverse(origin, directions, s0, s1, voxel_size: float):
    """3D DDA over many rays at once.

    Visits every voxel pierced by origin + s * direction for s in [s0, s1].
    Returns (ray index, voxel key, step number) for all visits.
    """
    n = len(directions)
    p0 = origin + s0[:, None] * directions
    v = np.floor(p0 / voxel_size).astype(np.int64)
    step = np.sign(directions).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = (v + (step > 0)) * voxel_size
        tmax = np.where(step != 0, (bound - p0) / directions, np.inf)
        tdelta = np.where(step != 0, voxel_size / np.abs(directions), np.inf)
    length = s1 - s0
    active = np.arange(n)
    rays, keys, steps = [], [], []
    k = 0
    while len(active):
        rays.append(active)
        keys.append(v[active].copy())
        steps.append(np.full(len(active), k))
        tm = tmax[active]
        axis = np.argmin(tm, axis=1)
        t = tm[np.arange(len(active)), axis]
        go = t <= length[active]
        active, axis = active[go], axis[go]
        v[active, axis] += step[active, axis]
        tmax[active, axis] += tdelta[active, axis]
        k += 1
    if not rays:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(rays), np.concatenate(keys), np.concatenate(steps)


def integrate(grid: VoxelGrid, cloud: LabeledPointCloud) -> IntegrationRecord:
    """Fuse one scan with bundled raycasting.

    Each bundle's ray is marched only through its truncation band. A voxel is
    updated by at most one bundle per call: the first in bundle order.
    """
    bundles = bundle_points(cloud, grid)
    grid.skipped_points += bundles.skipped
    record = IntegrationRecord(bundles)
    if not len(bundles):
        return record
    o = bundles.origin
    ray = bundles.endpoints - o
    rng = np.linalg.norm(ray, axis=1)
    ok = rng > 1e-12
    bidx = np.flatnonzero(ok)
    u = ray[ok] / rng[ok, None]
    r = rng[ok]
    T = grid.truncation_distance
    s0 = np.maximum(0.0, r - T)
    s1 = r + T
    ray_i, keys, steps = traverse(o, u, s0, s1, grid.voxel_size)
    # first bundle wins: order visits by bundle, then along the ray
    order = np.lexsort((steps, ray_i))
    ray_i, keys = ray_i[order], keys[order]
    _, first = np.unique(_pack(keys), return_index=True)
    first.sort()
    ray_i, keys = ray_i[first], keys[first]

    centers = grid.voxel_center(keys)
    sdf = r[ray_i] - np.einsum("ij,ij->i", centers - o, u[ray_i])
    sdf = np.clip(sdf, -T, T)
    w_new = bundles.sizes[bidx[ray_i]].astype(float)
    d_old = grid.get_distance(keys)
    w_old = grid.get_weight(keys)
    d = (w_old * d_old + w_new * sdf) / (w_old + w_new)
    w = np.minimum(w_old + w_new, grid.max_weight)
    grid.set_tsdf(keys, d, w)
    record.voxels, record.bundle, record.sdf = keys, bidx[ray_i], sdf
    return record


# ---------------------------------------------------------------- extraction

def _edge_crossings(dist: np.ndarray, valid: np.ndarray):
    """Exact (float64) zero crossings on every grid edge between two valid voxels."""
    pos, lo, hi, ts = [], [], [], []
    for a in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[a] = slice(0, -1)
        sl1[a] = slice(1, None)
        d0, d1 = dist[tuple(sl0)], dist[tuple(sl1)]
        ok = valid[tuple(sl0)] & valid[tuple(sl1)] & (np.minimum(d0, d1) <= 0) & (np.maximum(d0, d1) >= 0) & (d0 != d1)
        i0 = np.argwhere(ok)
        if not len(i0):
            continue
        a0, a1 = d0[ok], d1[ok]
        t = a0 / (a0 - a1)
        p = i0.astype(float)
        p[:, a] += t
        i1 = i0.copy()
        i1[:, a] += 1
        pos.append(p)
        lo.append(i0)
        hi.append(i1)
        ts.append(t)
    if not pos:
        return np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros((0, 3), int), np.zeros(0)
    return np.concatenate(pos), np.concatenate(lo), np.concatenate(hi), np.concatenate(ts)


def extract_surface(grid: VoxelGrid, min_weight: float | None = None, with_labels: bool = True) -> TriangleMesh:
    """Marching cubes at the zero level over all allocated blocks.

    Cells with any corner below ``min_weight`` are skipped. Vertex positions
    are linear interpolations of the stored distances in float64; each
    vertex takes the most likely label of the nearer voxel on its edge.
    """
    min_weight = grid.min_weight if min_weight is None else min_weight
    origin, dist, wt = grid.dense()
    if dist.size == 0 or min(dist.shape) < 2:
        return TriangleMesh()
    valid = wt >= min_weight
    cell_ok = (valid[:-1, :-1, :-1] & valid[1:, :-1, :-1] & valid[:-1, 1:, :-1] & valid[:-1, :-1, 1:]
               & valid[1:, 1:, :-1] & valid[1:, :-1, 1:] & valid[:-1, 1:, 1:] & valid[1:, 1:, 1:])
    if not cell_ok.any():
        return TriangleMesh()
    d_cells = dist[:-1, :-1, :-1]
    # skimage tests the mask at each cell's upper corner
    mask = np.zeros(dist.shape, dtype=bool)
    mask[1:, 1:, 1:] = cell_ok
    vol = np.where(valid, dist, grid.truncation_distance)
    if vol.min() > 0 or vol.max() < 0:
        return TriangleMesh()
    try:
        verts, faces, _, _ = marching_cubes(vol, level=0.0, mask=mask)
    except (RuntimeError, ValueError):
        return TriangleMesh()
    if not len(faces):
        return TriangleMesh()
    del d_cells

    exact, lo, hi, ts = _edge_crossings(vol, valid)
    labels_vox = None
    if len(exact):
        dd, nn = cKDTree(exact).query(verts.astype(float))
        matched = dd < 1e-3
        if not matched.all():
            logger.debug("%d marching-cubes vertices without an exact edge match", int((~matched).sum()))
        idx_pos = np.where(matched[:, None], exact[nn], verts.astype(float))
        near = np.where((ts[nn] <= 0.5)[:, None], lo[nn], hi[nn])
        near = np.where(matched[:, None], near, np.rint(verts).astype(int))
    else:
        idx_pos = verts.astype(float)
        near = np.rint(verts).astype(int)
    world = (idx_pos + origin + 0.5) * grid.voxel_size
    labels = None
    if with_labels:
        labels = np.asarray(most_likely_label(grid.get_probs(near + origin)), dtype=np.int64)
    mesh = TriangleMesh.from_arrays(world, faces.astype(np.int64), labels)
    return mesh
