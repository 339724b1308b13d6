"""Landmark meshes: per-frame 2D Delaunay lifted to 3D, and a fused multi-frame mesh.

Meshes store one vertex per landmark id so that consecutive frames can be
merged by id rather than by geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._predicates import incircle, orient2d

INF = -1  # the vertex at infinity closing hull edges into ghost triangles


@dataclass(frozen=True)
class TrackedFeature:
    landmark_id: int
    pixel: tuple[float, float]
    world_point: tuple[float, float, float]


@dataclass(eq=False)
class TriangleMesh:
    vertex_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1)
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    @classmethod
    def from_arrays(cls, vertices, faces, labels=None) -> TriangleMesh:
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        return cls(np.arange(len(vertices)), vertices, faces, labels)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    def validate(self) -> None:
        if len(self.vertex_ids) != len(self.vertices):
            raise ValueError("vertex ids and positions differ in length")
        if len(np.unique(self.vertex_ids)) != len(self.vertex_ids):
            raise ValueError("duplicate vertex id")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face")
        if self.labels is not None and len(self.labels) != len(self.vertices):
            raise ValueError("labels and vertices differ in length")

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def boundary_edges(self) -> np.ndarray:
        """Undirected edges used by exactly one face."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    def equals(self, other: TriangleMesh) -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels))
        return (np.array_equal(self.vertex_ids, other.vertex_ids) and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces) and same_labels)


# ---------------------------------------------------------------- Delaunay

class _Triangulation:
    """Bowyer-Watson with ghost triangles (a, b, INF) on every hull edge.

    A ghost is in conflict with p when p lies strictly outside its hull edge,
    or on the open edge itself; this is the limit of the circumcircle as the
    third vertex goes to infinity, so no bounding super-triangle is needed.
    """

    def __init__(self, pts: np.ndarray):
        self.p = pts.tolist()
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edge: dict[tuple[int, int], int] = {}
        self._next = 0
        self._last = None

    def add(self, t: tuple[int, int, int]) -> int:
        tid = self._next
        self._next += 1
        self.tris[tid] = t
        a, b, c = t
        self.edge[(a, b)] = self.edge[(b, c)] = self.edge[(c, a)] = tid
        if INF not in t:
            self._last = tid
        return tid

    def remove(self, tid: int) -> None:
        a, b, c = self.tris.pop(tid)
        for e in ((a, b), (b, c), (c, a)):
            if self.edge.get(e) == tid:
                del self.edge[e]

    def conflict(self, t, q) -> bool:
        a, b, c = t
        P = self.p
        if c == INF:
            o = orient2d(P[a], P[b], q)
            if o > 0:
                return True
            if o < 0:
                return False
            # collinear: conflict only on the open segment
            return (min(P[a][0], P[b][0]) <= q[0] <= max(P[a][0], P[b][0])
                    and min(P[a][1], P[b][1]) <= q[1] <= max(P[a][1], P[b][1])
                    and tuple(q) != tuple(P[a]) and tuple(q) != tuple(P[b]))
        return incircle(P[a], P[b], P[c], q) > 0

    def locate(self, q) -> int:
        """Visibility walk to a triangle in conflict with q."""
        P = self.p
        tid = self._last
        for _ in range(4 * len(self.tris) + 10):
            t = self.tris[tid]
            if INF in t:
                return tid
            a, b, c = t
            for u, v in ((a, b), (b, c), (c, a)):
                if orient2d(P[u], P[v], q) < 0:
                    tid = self.edge[(v, u)]
                    break
            else:
                return tid
        for tid, t in self.tris.items():  # walk failed to terminate; fall back to a scan
            if self.conflict(t, q):
                return tid
        raise RuntimeError("point location failed")

    def insert(self, k: int) -> None:
        q = self.p[k]
        start = self.locate(q)
        if not self.conflict(self.tris[start], q):
            return  # coincides with an existing vertex
        cavity = {start}
        stack = [start]
        boundary = []
        while stack:
            tid = stack.pop()
            a, b, c = self.tris[tid]
            for u, v in ((a, b), (b, c), (c, a)):
                nb = self.edge.get((v, u))
                if nb in cavity:
                    continue
                if nb is not None and self.conflict(self.tris[nb], q):
                    cavity.add(nb)
                    stack.append(nb)
                else:
                    boundary.append((u, v))
        # boundary edges of neighbours that were added later are interior; filter them
        boundary = [(u, v) for (u, v) in boundary if self.edge.get((v, u)) not in cavity]
        for tid in cavity:
            self.remove(tid)
        for u, v in boundary:
            if u == INF:
                self.add((v, k, INF))
            elif v == INF:
                self.add((k, u, INF))
            else:
                self.add((u, v, k))

    def triangles(self) -> list[tuple[int, int, int]]:
        out = []
        for t in self.tris.values():
            if INF in t:
                continue
            i = t.index(min(t))
            out.append(t[i:] + t[:i])
        return sorted(out)


def delaunay_2d(points) -> list[tuple[int, int, int]]:
    """Delaunay triangulation of 2D points as counter-clockwise index triplets.

    Duplicate points are triangulated once (first occurrence). All-collinear
    input yields an empty list.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise ValueError("need at least three points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point")
    seen: dict[tuple[float, float], int] = {}
    order = []
    for i, q in enumerate(map(tuple, pts.tolist())):
        if q not in seen:
            seen[q] = i
            order.append(i)
    if len(order) < 3:
        return []
    a, b = order[0], order[1]
    P = pts.tolist()
    c = next((i for i in order[2:] if orient2d(P[a], P[b], P[i]) != 0), None)
    if c is None:
        return []
    if orient2d(P[a], P[b], P[c]) < 0:
        a, b = b, a
    tri = _Triangulation(pts)
    tri.add((a, b, c))
    tri.add((b, a, INF))
    tri.add((c, b, INF))
    tri.add((a, c, INF))
    for i in order:
        if i not in (a, b, c):
            tri.insert(i)
    return tri.triangles()


def is_delaunay(points, triangles, tol: float = 1e-9) -> bool:
    """Brute-force empty-circumcircle check (float, with a relative tolerance)."""
    P = np.asarray(points, dtype=float)
    for t in triangles:
        a, b, c = P[list(t)]
        # 3x3 in-circle determinant of every point against (a, b, c)
        A = np.stack([a - P, b - P, c - P], axis=1)  # (n, 3, 2)
        lift = (A ** 2).sum(axis=2)
        M = np.concatenate([A, lift[..., None]], axis=2)
        det = np.linalg.det(M)
        scale = (np.abs(A).max(axis=(1, 2)) + 1e-300) ** 4
        mask = np.ones(len(P), dtype=bool)
        mask[list(t)] = False
        if np.any(det[mask] > tol * scale[mask]):
            return False
    return True


# ---------------------------------------------------------------- meshes

def per_frame_mesh(features: Sequence[TrackedFeature], max_edge_length: float = 1.5,
                   label_image: np.ndarray | None = None) -> TriangleMesh:
    """Triangulate feature pixels and lift each vertex to its landmark estimate.

    Triangles with a 3D edge longer than ``max_edge_length`` are dropped so the
    mesh does not bridge depth discontinuities. With ``label_image`` each
    vertex takes the class at its pixel.
    """
    if len(features) < 3:
        return TriangleMesh()
    pix = np.array([f.pixel for f in features], dtype=float)
    world = np.array([f.world_point for f in features], dtype=float)
    tris = np.array(delaunay_2d(pix), dtype=np.int64).reshape(-1, 3)
    if len(tris):
        v = world[tris]
        edge_len = np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2)
        tris = tris[edge_len.max(axis=1) <= max_edge_length]
    used = np.unique(tris)
    remap = -np.ones(len(features), dtype=np.int64)
    remap[used] = np.arange(len(used))
    ids = np.array([features[i].landmark_id for i in used], dtype=np.int64)
    labels = None
    if label_image is not None:
        h, w = label_image.shape
        px = np.clip(np.floor(pix[used]).astype(int), 0, [w - 1, h - 1])
        labels = label_image[px[:, 1], px[:, 0]].astype(np.int64)
    return TriangleMesh(ids, world[used], remap[tris], labels)


def fuse_multi_frame(current: TriangleMesh, incoming: TriangleMesh, latest_estimates: Mapping[int, Sequence[float]],
                     horizon: Iterable[int]) -> TriangleMesh:
    """Merge a per-frame mesh into the multi-frame mesh, refresh and prune it.

    Vertices and faces are keyed by landmark id. Faces already present (same
    vertex set) keep their original winding. Vertex positions are replaced by
    ``latest_estimates`` where available; landmarks outside ``horizon`` are
    dropped along with their faces. Output vertices are sorted by id.
    """
    horizon = set(horizon)
    pos: dict[int, np.ndarray] = {}
    lab: dict[int, int] = {}
    has_labels = current.labels is not None or incoming.labels is not None
    for mesh in (current, incoming):
        for idx, lid in enumerate(mesh.vertex_ids.tolist()):
            if lid not in pos:
                pos[lid] = mesh.vertices[idx]
            if mesh.labels is not None:
                lab[lid] = int(mesh.labels[idx])

    faces: dict[frozenset, tuple[int, int, int]] = {}
    for mesh in (current, incoming):
        ids = mesh.vertex_ids
        for f in ids[mesh.faces].tolist():
            key = frozenset(f)
            if key not in faces:
                faces[key] = tuple(f)

    keep = sorted(lid for lid in pos if lid in horizon)
    index = {lid: i for i, lid in enumerate(keep)}
    verts = np.array([latest_estimates[lid] if lid in latest_estimates else pos[lid] for lid in keep],
                     dtype=float).reshape(-1, 3)
    out_faces = [(index[a], index[b], index[c]) for a, b, c in faces.values()
                 if a in index and b in index and c in index]
    out_faces.sort()
    labels = np.array([lab.get(lid, 0) for lid in keep], dtype=np.int64) if has_labels else None
    return TriangleMesh(np.array(keep, dtype=np.int64), verts, np.array(out_faces, dtype=np.int64).reshape(-1, 3),
                        labels)
