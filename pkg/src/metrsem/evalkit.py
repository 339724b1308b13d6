"""Trajectory, mesh and semantic evaluation, plus per-module timing."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .mesher import TriangleMesh


class DegenerateTrajectoryError(ValueError):
    pass


def _positions(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float).reshape(-1, 3)
    return np.array([p.t if isinstance(p, Pose) else p for p in traj], dtype=float).reshape(-1, 3)


def _min_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: half-turn about any axis orthogonal to a
        ortho = np.eye(3)[int(np.argmin(np.abs(a)))]
        axis = np.cross(a, ortho)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K * ((1 - c) / s**2)


def align_se3(estimate, ground_truth, allow_degenerate: bool = False) -> Pose:
    """Rigid T minimising sum |T * gt_i - est_i|^2 over associated positions.

    Collinear input leaves the rotation about the line undetermined: that is an
    error unless ``allow_degenerate``, in which case the smallest rotation
    aligning the two lines is used.
    """
    E, G = _positions(estimate), _positions(ground_truth)
    if len(E) != len(G):
        raise ValueError("trajectories differ in length")
    if len(E) < 3:
        raise DegenerateTrajectoryError("alignment needs at least 3 poses")
    ce, cg = E.mean(axis=0), G.mean(axis=0)
    H = (G - cg).T @ (E - ce)
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], 1e-300)
    if S[1] <= 1e-10 * scale:
        if not allow_degenerate:
            raise DegenerateTrajectoryError("trajectory is collinear; rotation is not determined")
        if S[0] <= 1e-300:
            R = np.eye(3)
        else:
            R = _min_rotation(U[:, 0], Vt[0])
    else:
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
        R = Vt.T @ D @ U.T
    return Pose(R, ce - R @ cg)


def ate_rmse(estimate, ground_truth) -> float:
    E, G = _positions(estimate), _positions(ground_truth)
    if len(E) != len(G):
        raise ValueError("trajectories differ in length")
    if len(E) == 0:
        return 0.0
    if len(E) < 3:
        T = Pose(np.eye(3), E.mean(axis=0) - G.mean(axis=0))
    else:
        T = align_se3(E, G, allow_degenerate=True)
    err = E - T.act(G)
    return float(math.sqrt(np.mean(np.sum(err**2, axis=1))))


def associate(stamps_a, stamps_b, tolerance: float = 0.01) -> list[tuple[int, int]]:
    """Nearest-timestamp matching, one-to-one, within ``tolerance`` seconds."""
    a = np.asarray(stamps_a, dtype=float)
    b = np.asarray(stamps_b, dtype=float)
    if not len(a) or not len(b):
        return []
    order = np.argsort(b, kind="stable")
    bs = b[order]
    cand = []
    for i, t in enumerate(a):
        k = int(np.searchsorted(bs, t))
        for kk in (k - 1, k):
            if 0 <= kk < len(bs) and abs(bs[kk] - t) <= tolerance:
                cand.append((abs(bs[kk] - t), i, int(order[kk])))
    cand.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.append((i, j))
    return sorted(out)


# ---------------------------------------------------------------- mesh metrics

def sample_mesh(mesh: TriangleMesh, density: float = 1e3, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples, round(area * density) of them (at least one per mesh)."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    areas = mesh.face_areas()
    total = float(areas.sum())
    n = max(1, int(round(total * density)))
    rng = np.random.Generator(np.random.Philox(seed))
    if total <= 0:
        tri = rng.integers(mesh.n_faces, size=n)
    else:
        tri = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    V = mesh.vertices[mesh.faces[tri]]
    return ((1 - r1)[:, None] * V[:, 0] + (r1 * (1 - r2))[:, None] * V[:, 1] + (r1 * r2)[:, None] * V[:, 2])


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((src - cs).T @ (dst - cd))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def icp(source: np.ndarray, target: np.ndarray, threshold: float = 1.0, max_iters: int = 30,
        tol: float = 1e-10) -> tuple[Pose, np.ndarray]:
    """Point-to-point ICP moving ``source`` onto ``target``; pairs beyond ``threshold`` ignored."""
    tree = cKDTree(target)
    T = Pose.identity()
    cur = source.copy()
    prev = math.inf
    for _ in range(max_iters):
        d, j = tree.query(cur, distance_upper_bound=threshold)
        ok = np.isfinite(d)
        if ok.sum() < 3:
            break
        step = _kabsch(cur[ok], target[j[ok]])
        cur = step.act(cur)
        T = step @ T
        err = float(np.mean(d[ok] ** 2))
        if abs(prev - err) < tol:
            break
        prev = err
    return T, cur


@dataclass
class MeshScores:
    accuracy: float  # RMSE of estimate -> ground-truth distances within the threshold
    completeness: float  # RMSE of ground-truth -> estimate distances within the threshold
    accuracy_all: float
    completeness_all: float
    n_estimate: int
    n_ground_truth: int


def _rmse(d: np.ndarray) -> float:
    return float(math.sqrt(np.mean(d**2))) if len(d) else float("nan")


def cloud_accuracy_completeness(estimate_pts, gt_pts, threshold: float = 1.0) -> MeshScores:
    est = np.asarray(estimate_pts, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_pts, dtype=float).reshape(-1, 3)
    if not len(est) or not len(gt):
        raise ValueError("accuracy/completeness need non-empty point sets")
    d_acc = cKDTree(gt).query(est)[0]
    d_comp = cKDTree(est).query(gt)[0]
    return MeshScores(_rmse(d_acc[d_acc <= threshold]), _rmse(d_comp[d_comp <= threshold]),
                      _rmse(d_acc), _rmse(d_comp), len(est), len(gt))


def mesh_accuracy_completeness(estimated: TriangleMesh, ground_truth_cloud, density: float = 1e3,
                               icp_threshold: float = 1.0, use_icp: bool = False, seed: int = 0) -> MeshScores:
    gt = np.asarray(ground_truth_cloud, dtype=float).reshape(-1, 3)
    if estimated.is_empty or not len(gt):
        raise ValueError("accuracy/completeness need a non-empty mesh and cloud")
    est = sample_mesh(estimated, density, seed)
    if use_icp:
        _, est = icp(est, gt, icp_threshold)
    return cloud_accuracy_completeness(est, gt, icp_threshold)


# ---------------------------------------------------------------- semantics

@dataclass
class SemanticScores:
    miou: float
    acc: float
    per_class_iou: dict[int, float]
    confusion: np.ndarray  # rows: ground truth, columns: prediction


def semantic_metrics(predicted, ground_truth, num_classes: int | None = None) -> SemanticScores:
    """Confusion-matrix scores. mIoU averages over classes present in the ground truth."""
    p = np.asarray(predicted, dtype=np.int64).reshape(-1)
    g = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if len(p) != len(g):
        raise ValueError("prediction and ground truth differ in length")
    if not len(g):
        raise ValueError("no points to score")
    K = num_classes if num_classes is not None else int(max(p.max(), g.max())) + 1
    C = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    tp = np.diag(C).astype(float)
    denom = C.sum(axis=0) + C.sum(axis=1) - tp
    present = np.flatnonzero(C.sum(axis=1) > 0)
    iou = {int(c): float(tp[c] / denom[c]) for c in range(K) if denom[c] > 0}
    miou = float(np.mean([iou[int(c)] for c in present]))
    return SemanticScores(miou, float(tp.sum() / C.sum()), iou, C)


# ---------------------------------------------------------------- timing

class TimingProbe:
    def __init__(self):
        self._samples: dict[str, list[float]] = {}

    def record(self, tag: str, seconds: float) -> None:
        self._samples.setdefault(tag, []).append(float(seconds))

    @contextmanager
    def time(self, tag: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record(tag, time.perf_counter() - t0)

    def merge(self, other: TimingProbe) -> None:
        for tag, xs in other._samples.items():
            self._samples.setdefault(tag, []).extend(xs)

    def samples(self, tag: str) -> list[float]:
        return list(self._samples.get(tag, []))

    def stats(self) -> dict[str, dict[str, float]]:
        """Per tag: count, mean, median and p95 in milliseconds.

        p95 is the order statistic at rank ceil(0.95 n), no interpolation.
        """
        out = {}
        for tag in sorted(self._samples):
            ms = np.array(self._samples[tag]) * 1e3
            out[tag] = {
                "count": int(len(ms)),
                "mean_ms": float(ms.mean()),
                "median_ms": float(np.median(ms)),
                "p95_ms": float(np.percentile(ms, 95, method="inverted_cdf")),
            }
        return out


# ---------------------------------------------------------------- report

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


@dataclass
class MetricsReport:
    ate_rmse: float | None = None
    ate_rmse_odometry: float | None = None
    mesh_accuracy_rmse: float | None = None
    mesh_completeness_rmse: float | None = None
    mesh_accuracy_rmse_all: float | None = None
    mesh_completeness_rmse_all: float | None = None
    multiframe_accuracy_rmse: float | None = None
    multiframe_completeness_rmse: float | None = None
    miou: float | None = None
    acc: float | None = None
    per_class_iou: dict[int, float] = field(default_factory=dict)
    timing: dict[str, dict[str, float]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("miou", "acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        for v in self.per_class_iou.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("per-class IoU outside [0, 1]")
        for name in ("ate_rmse", "mesh_accuracy_rmse", "mesh_completeness_rmse"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} is negative")

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return _clean(d)

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    CSV_FIELDS = ("ate_rmse", "ate_rmse_odometry", "mesh_accuracy_rmse", "mesh_completeness_rmse", "miou", "acc")

    def to_csv_row(self, header: bool = False, **prefix) -> str:
        buf = io.StringIO()
        cols = list(prefix) + list(self.CSV_FIELDS)
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(cols)
        vals = list(prefix.values()) + [getattr(self, f) for f in self.CSV_FIELDS]
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in vals])
        return buf.getvalue()
