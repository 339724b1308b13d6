"""Deterministic synthetic world standing in for a visual-inertial front end.

Produces a ground-truth keyframe trajectory, noisy odometry, loop-closure
proposals with injected outliers, surface landmarks for the mesher, and
depth + label images rendered from a scene of axis-aligned primitives.

Camera convention: z forward (along the motion), y down (world -z), x right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose, between, exp
from .mesher import TrackedFeature
from .pcm import LOOP_CLOSURE, ODOMETRY, RelativePoseMeasurement
from .volumetric import LabeledPointCloud

_STREAMS = ("odometry", "loop_inlier", "loop_outlier", "loop_pick", "landmarks", "landmark_noise", "depth_noise")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent counter-based stream per purpose; adding a stream never shifts the others."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_STREAMS.index(name),))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- scene

@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box must have positive extent on every axis")


@dataclass(frozen=True)
class Plane:
    """Axis-aligned finite rectangle: coordinate ``axis`` == ``offset``,
    the other two (in increasing axis order) within [lo, hi]."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    label: int

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("plane must have positive extent")

    @property
    def others(self) -> tuple[int, int]:
        return tuple(a for a in range(3) if a != self.axis)


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 160.0
    cy: float = 120.0
    width: int = 320
    height: int = 240

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("invalid intrinsics")

    def rays(self) -> np.ndarray:
        """Camera-frame directions with unit z, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.0, 0.0, 0.0), (10.0, 8.0, 3.0))

    def __len__(self):
        return len(self.primitives)

    @classmethod
    def default_room(cls) -> Scene:
        W, D, H = 10.0, 8.0, 3.0
        prims = [
            Plane(2, 0.0, (0, 0), (W, D), 1),
            Plane(2, H, (0, 0), (W, D), 3),
            Plane(0, 0.0, (0, 0), (D, H), 2),
            Plane(0, W, (0, 0), (D, H), 2),
            Plane(1, 0.0, (0, 0), (W, H), 2),
            Plane(1, D, (0, 0), (W, H), 2),
            Box((0.3, 5.2, 0.0), (1.1, 7.4, 2.0), 4),
            Box((6.8, 0.5, 0.0), (8.6, 1.7, 0.8), 5),
            Box((8.6, 4.8, 0.0), (9.4, 5.6, 0.8), 6),
        ]
        return cls(prims, ((0.0, 0.0, 0.0), (W, D, H)))

    # -- file format ---------------------------------------------------
    def write(self, path) -> None:
        lines = ["# metrsem scene v1",
                 "bounds " + " ".join(repr(float(v)) for v in (*self.bounds[0], *self.bounds[1]))]
        for p in self.primitives:
            if isinstance(p, Box):
                lines.append(f"box {p.label} " + " ".join(repr(float(v)) for v in (*p.lo, *p.hi)))
            else:
                lines.append(f"plane {p.label} {p.axis} {float(p.offset)!r} "
                             + " ".join(repr(float(v)) for v in (*p.lo, *p.hi)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> Scene:
        prims = []
        bounds = None
        for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            try:
                if tok[0] == "bounds":
                    v = [float(x) for x in tok[1:7]]
                    bounds = (tuple(v[:3]), tuple(v[3:]))
                elif tok[0] == "box":
                    v = [float(x) for x in tok[2:8]]
                    prims.append(Box(tuple(v[:3]), tuple(v[3:]), int(tok[1])))
                elif tok[0] == "plane":
                    v = [float(x) for x in tok[4:8]]
                    prims.append(Plane(int(tok[2]), float(tok[3]), tuple(v[:2]), tuple(v[2:]), int(tok[1])))
                else:
                    raise ValueError(f"unknown primitive {tok[0]!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
        scene = cls(prims)
        if bounds is not None:
            scene.bounds = bounds
        return scene

    # -- geometry queries ----------------------------------------------
    def surface_distance(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Distance from each point to the nearest primitive surface and that primitive's label."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        best = np.full(len(pts), np.inf)
        label = np.zeros(len(pts), dtype=np.int64)
        for prim in self.primitives:
            d = _distance_to(prim, pts)
            closer = d < best
            best[closer] = d[closer]
            label[closer] = prim.label
        return best, label

    def nearest_surface_label(self, points) -> np.ndarray:
        return self.surface_distance(points)[1]

    def sample_surface(self, density: float = 1e3) -> tuple[np.ndarray, np.ndarray]:
        """Regular samples on every primitive face at ``density`` points per m^2."""
        step = 1.0 / math.sqrt(density)
        pts, labs = [], []
        for prim in self.primitives:
            for axis, offset, lo, hi in _faces(prim):
                a, b = [i for i in range(3) if i != axis]
                ua = _grid_1d(lo[0], hi[0], step)
                ub = _grid_1d(lo[1], hi[1], step)
                A, B = np.meshgrid(ua, ub, indexing="ij")
                P = np.empty((A.size, 3))
                P[:, axis] = offset
                P[:, a] = A.ravel()
                P[:, b] = B.ravel()
                pts.append(P)
                labs.append(np.full(A.size, prim.label, dtype=np.int64))
        if not pts:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        return np.concatenate(pts), np.concatenate(labs)


def _grid_1d(lo: float, hi: float, step: float) -> np.ndarray:
    n = max(1, int(math.ceil((hi - lo) / step)))
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def _faces(prim):
    if isinstance(prim, Plane):
        yield prim.axis, prim.offset, prim.lo, prim.hi
        return
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for off in (prim.lo[axis], prim.hi[axis]):
            yield axis, off, (prim.lo[a], prim.lo[b]), (prim.hi[a], prim.hi[b])


def _distance_to(prim, pts: np.ndarray) -> np.ndarray:
    if isinstance(prim, Plane):
        a, b = prim.others
        da = np.maximum(0.0, np.maximum(prim.lo[0] - pts[:, a], pts[:, a] - prim.hi[0]))
        db = np.maximum(0.0, np.maximum(prim.lo[1] - pts[:, b], pts[:, b] - prim.hi[1]))
        dn = pts[:, prim.axis] - prim.offset
        return np.sqrt(da**2 + db**2 + dn**2)
    lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
    outside = np.maximum(0.0, np.maximum(lo - pts, pts - hi))
    d_out = np.linalg.norm(outside, axis=1)
    d_in = np.minimum(pts - lo, hi - pts).min(axis=1)
    return np.where(d_out > 0, d_out, np.maximum(d_in, 0.0))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class SimConfig:
    trajectory: str = "circle"
    n_keyframes: int = 200
    keyframe_dt: float = 0.2
    # circle
    radius: float = 3.0
    center: tuple[float, float, float] = (5.0, 4.0, 1.5)
    laps: float = 2.0
    # lawnmower
    row_length: float = 6.0
    row_spacing: float = 2.0
    rows: int = 3
    start: tuple[float, float, float] = (2.0, 2.0, 1.5)
    step: float = 0.25
    # odometry noise per keyframe step
    sigma_rot: float = 0.001
    sigma_trans: float = 0.01
    # loop closures
    n_loops: int = 20
    loop_sigma_rot: float = 0.001
    loop_sigma_trans: float = 0.01
    loop_radius: float = 0.5
    min_loop_separation: int = 20
    outlier_rate: float = 0.0
    outlier_mode: str = "replace"
    outlier_min_distance: float = 2.0
    # landmarks / features
    n_landmarks: int = 3000
    landmark_sigma: float = 0.02
    max_features: int = 300
    # depth
    depth_noise: float = 0.0
    intrinsics: Intrinsics = Intrinsics()
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in ("circle", "lawnmower"):
            raise ValueError("trajectory must be 'circle' or 'lawnmower'")
        if self.n_keyframes < 0 or self.n_loops < 0:
            raise ValueError("counts must be non-negative")
        for name in ("sigma_rot", "sigma_trans", "loop_sigma_rot", "loop_sigma_trans", "landmark_sigma", "depth_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.outlier_mode not in ("replace", "augment"):
            raise ValueError("outlier_mode must be 'replace' or 'augment'")

    def with_(self, **kw) -> SimConfig:
        return replace(self, **kw)

    def odometry_covariance(self) -> np.ndarray:
        return _diag_cov(self.sigma_rot, self.sigma_trans)

    def loop_covariance(self) -> np.ndarray:
        return _diag_cov(self.loop_sigma_rot, self.loop_sigma_trans)


def _diag_cov(sr: float, st: float) -> np.ndarray:
    # a zero sigma still needs an invertible covariance downstream
    sr2, st2 = max(sr * sr, 1e-12), max(st * st, 1e-12)
    return np.diag([sr2] * 3 + [st2] * 3)


# ---------------------------------------------------------------- trajectory

def camera_pose(position, heading) -> Pose:
    """Camera at ``position`` looking horizontally along ``heading``."""
    z = np.array([heading[0], heading[1], 0.0])
    z /= np.linalg.norm(z)
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, z)
    return Pose(np.column_stack([x, y, z]), np.asarray(position, dtype=float))


def generate_trajectory(cfg: SimConfig) -> list[Pose]:
    n = cfg.n_keyframes
    if n == 0:
        return []
    if cfg.trajectory == "circle":
        cx, cy, cz = cfg.center
        ang = 2.0 * math.pi * cfg.laps * np.arange(n) / n if cfg.laps else np.zeros(n)
        out = []
        for a in ang:
            pos = (cx + cfg.radius * math.cos(a), cy + cfg.radius * math.sin(a), cz)
            out.append(camera_pose(pos, (-math.sin(a), math.cos(a))))
        return out
    return _lawnmower(cfg)


def _lawnmower(cfg: SimConfig) -> list[Pose]:
    # rows along +x / -x joined by semicircular turns towards +y, sampled every
    # cfg.step metres of arc length; the path stops at its end
    r = cfg.row_spacing / 2.0
    x0, y0, z0 = cfg.start
    segs = []
    for k in range(cfg.rows):
        d = 1.0 if k % 2 == 0 else -1.0
        xs = x0 if d > 0 else x0 + cfg.row_length
        y = y0 + k * cfg.row_spacing
        segs.append(("line", xs, y, d, cfg.row_length))
        if k < cfg.rows - 1:
            segs.append(("arc", xs + d * cfg.row_length, y + r, d, math.pi * r))
    total = sum(sg[4] for sg in segs)
    out = []
    for i in range(cfg.n_keyframes):
        s = min(i * cfg.step, total)
        for kind, ax, ay, d, length in segs:
            if s <= length:
                break
            s -= length
        if kind == "line":
            out.append(camera_pose((ax + d * s, ay, z0), (d, 0.0)))
            continue
        a = -math.pi / 2 + d * s / r
        pos = (ax + r * math.cos(a), ay + r * math.sin(a), z0)
        head = (-d * math.sin(a), d * math.cos(a))
        out.append(camera_pose(pos, head))
    return out


def timestamps(cfg: SimConfig, n: int | None = None) -> np.ndarray:
    n = cfg.n_keyframes if n is None else n
    return np.arange(n) * cfg.keyframe_dt


# ---------------------------------------------------------------- measurements

def _noise(rng: np.random.Generator, sr: float, st: float, size: int) -> np.ndarray:
    z = rng.standard_normal((size, 6))
    return z * np.array([sr] * 3 + [st] * 3)


def corrupt_odometry(gt: Sequence[Pose], cfg: SimConfig) -> list[RelativePoseMeasurement]:
    rng = rng_stream(cfg.seed, "odometry")
    n = max(len(gt) - 1, 0)
    noise = _noise(rng, cfg.sigma_rot, cfg.sigma_trans, n)
    cov = cfg.odometry_covariance()
    out = []
    for k in range(n):
        Z = between(gt[k], gt[k + 1]) @ exp(noise[k])
        out.append(RelativePoseMeasurement(k, k + 1, Z, cov, ODOMETRY))
    return out


def loop_candidates(gt: Sequence[Pose], cfg: SimConfig) -> list[tuple[int, int]]:
    """Spatially near, temporally separated keyframe pairs with similar heading."""
    if len(gt) < 2:
        return []
    P = np.array([p.t for p in gt])
    Zc = np.array([p.R[:, 2] for p in gt])
    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    cosang = Zc @ Zc.T
    i, j = np.nonzero((d <= cfg.loop_radius) & (cosang > math.cos(math.radians(30))))
    keep = j - i >= cfg.min_loop_separation
    return list(zip(i[keep].tolist(), j[keep].tolist()))


def _far_pairs(gt, cfg) -> list[tuple[int, int]]:
    P = np.array([p.t for p in gt])
    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    i, j = np.nonzero(np.triu(d > cfg.outlier_min_distance, k=2))
    return list(zip(i.tolist(), j.tolist()))


def _outlier_pose(rng: np.random.Generator) -> Pose:
    # a plausible-looking but wrong relative pose: up to 90 degrees yaw about the
    # camera's vertical axis and up to 1 m translation
    yaw = rng.uniform(-math.pi / 2, math.pi / 2)
    t = rng.uniform(-1.0, 1.0, 3)
    return exp(np.array([0.0, yaw, 0.0, 0.0, 0.0, 0.0])) @ Pose(np.eye(3), t)


def generate_loops(gt: Sequence[Pose], cfg: SimConfig) -> tuple[list[RelativePoseMeasurement], np.ndarray]:
    """Loop-closure proposals plus a separate ground-truth inlier flag array.

    ``replace`` mode: each of ``n_loops`` slots is an outlier with probability p.
    ``augment`` mode: all ``n_loops`` true loops are kept and
    round(n_loops * p / (1 - p)) outliers are added, so p is the outlier fraction.
    Loops are returned in detection order (by later keyframe).
    """
    cands = loop_candidates(gt, cfg)
    far = _far_pairs(gt, cfg) if len(gt) > 2 else []
    pick = rng_stream(cfg.seed, "loop_pick")
    rin = rng_stream(cfg.seed, "loop_inlier")
    rout = rng_stream(cfg.seed, "loop_outlier")
    cov = cfg.loop_covariance()

    n_true = min(cfg.n_loops, len(cands))
    chosen = sorted(pick.choice(len(cands), size=n_true, replace=False).tolist()) if n_true else []
    p = cfg.outlier_rate
    if cfg.outlier_mode == "replace":
        is_out = pick.random(n_true) < p
        n_extra = 0
    else:
        if p >= 1.0:
            raise ValueError("augment mode needs outlier_rate < 1")
        is_out = np.zeros(n_true, dtype=bool)
        n_extra = int(round(cfg.n_loops * p / (1.0 - p)))
    noise = _noise(rin, cfg.loop_sigma_rot, cfg.loop_sigma_trans, n_true)

    loops, flags = [], []
    for s, ci in enumerate(chosen):
        i, j = cands[ci]
        if not is_out[s]:
            Z = between(gt[i], gt[j]) @ exp(noise[s])
            loops.append(RelativePoseMeasurement(i, j, Z, cov, LOOP_CLOSURE))
            flags.append(True)
    n_out = int(is_out.sum()) + n_extra
    if n_out and not far:
        raise ValueError("no keyframe pairs far enough apart for outliers")
    for _ in range(n_out):
        i, j = far[int(rout.integers(len(far)))]
        loops.append(RelativePoseMeasurement(i, j, _outlier_pose(rout), cov, LOOP_CLOSURE))
        flags.append(False)
    order = sorted(range(len(loops)), key=lambda k: (loops[k].to_key, loops[k].from_key, k))
    return [loops[k] for k in order], np.array([flags[k] for k in order], dtype=bool)


# ---------------------------------------------------------------- rendering

def _hit_distances(prim, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    eps = 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(prim, Plane):
            ax = prim.axis
            t = (prim.offset - o[ax]) / d[:, ax]
            p = o + t[:, None] * d
            a, b = prim.others
            ok = (t > eps) & (p[:, a] >= prim.lo[0]) & (p[:, a] <= prim.hi[0]) \
                & (p[:, b] >= prim.lo[1]) & (p[:, b] <= prim.hi[1])
            return np.where(ok, t, np.inf)
        lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
        t1 = (lo - o) / d
        t2 = (hi - o) / d
        # axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        near = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        far = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tn = near.max(axis=1)
        tf = far.min(axis=1)
        t = np.where(tn > eps, tn, tf)
        ok = (tn <= tf) & (t > eps)
        return np.where(ok, t, np.inf)


def render(scene: Scene, pose: Pose, intrinsics: Intrinsics = Intrinsics(),
           rng: np.random.Generator | None = None, depth_noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Depth (z-depth, metres) and label images; nearest hit wins, no hit -> 0."""
    rays_c = intrinsics.rays().reshape(-1, 3)
    d = rays_c @ pose.R.T  # unit-z camera rays, so the hit parameter is the z-depth
    o = pose.t
    best = np.full(len(d), np.inf)
    label = np.zeros(len(d), dtype=np.int64)
    for prim in scene.primitives:
        t = _hit_distances(prim, o, d)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = prim.label
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    if depth_noise > 0 and rng is not None:
        depth = np.where(hit, depth + rng.normal(0.0, depth_noise, depth.shape), 0.0)
    shape = (intrinsics.height, intrinsics.width)
    return depth.reshape(shape), np.where(hit, label, 0).reshape(shape)


def backproject(depth: np.ndarray, labels: np.ndarray, intrinsics: Intrinsics, pose: Pose) -> LabeledPointCloud:
    rays = intrinsics.rays()
    valid = depth > 0
    pts_c = rays[valid] * depth[valid][:, None]
    return LabeledPointCloud(pose, pose.act(pts_c), labels[valid], frame="world")


def project(points, pose: Pose, intrinsics: Intrinsics):
    """Pixel coordinates (u, v) and z-depth of world points in the camera."""
    pc = (np.asarray(points, dtype=float) - pose.t) @ pose.R
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * pc[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * pc[:, 1] / z + intrinsics.cy
    return u, v, z


def visible_from(points, pose: Pose, depth: np.ndarray, intrinsics: Intrinsics, tol: float = 0.05) -> np.ndarray:
    """Points that project inside the image and agree with the rendered depth."""
    u, v, z = project(points, pose, intrinsics)
    ui, vi = np.rint(u), np.rint(v)
    ok = (z > 1e-6) & (ui >= 0) & (ui < intrinsics.width) & (vi >= 0) & (vi < intrinsics.height)
    out = np.zeros(len(z), dtype=bool)
    idx = np.flatnonzero(ok)
    dz = depth[vi[idx].astype(int), ui[idx].astype(int)]
    out[idx] = (dz > 0) & (np.abs(dz - z[idx]) <= tol * np.maximum(1.0, z[idx]))
    return out


# ---------------------------------------------------------------- landmarks

@dataclass
class Landmarks:
    ids: np.ndarray
    truth: np.ndarray  # (N, 3)
    estimate: np.ndarray  # (N, 3), what the estimator believes
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


def generate_landmarks(scene: Scene, cfg: SimConfig) -> Landmarks:
    if not scene.primitives or cfg.n_landmarks == 0:
        z = np.zeros((0, 3))
        return Landmarks(np.zeros(0, dtype=np.int64), z, z.copy(), np.zeros(0, dtype=np.int64))
    rng = rng_stream(cfg.seed, "landmarks")
    pts, labs = scene.sample_surface(400.0)
    pick = np.sort(rng.choice(len(pts), size=min(cfg.n_landmarks, len(pts)), replace=False))
    truth = pts[pick]
    noise = rng_stream(cfg.seed, "landmark_noise").normal(0.0, cfg.landmark_sigma, truth.shape)
    return Landmarks(np.arange(len(truth), dtype=np.int64), truth, truth + noise, labs[pick])


def track_features(landmarks: Landmarks, pose: Pose, depth: np.ndarray, intrinsics: Intrinsics,
                   max_features: int, estimates=None) -> list[TrackedFeature]:
    """Landmarks visible in this keyframe, as tracked 2D features.

    When more than ``max_features`` are visible the lowest landmark ids are kept,
    which keeps tracks stable across consecutive frames.
    """
    if not len(landmarks):
        return []
    vis = visible_from(landmarks.truth, pose, depth, intrinsics, tol=0.02)
    idx = np.flatnonzero(vis)[:max_features]
    u, v, _ = project(landmarks.truth[idx], pose, intrinsics)
    est = landmarks.estimate if estimates is None else estimates
    return [TrackedFeature(int(landmarks.ids[k]), (float(a), float(b)), tuple(float(c) for c in est[k]))
            for k, a, b in zip(idx, u, v)]
