"""Pose graph construction and Gauss-Newton optimization on SE(3).

Edge residual: r_ij = log(Z_ij^-1 X_i^-1 X_j), weighted by the inverse
measurement covariance. Poses are updated with the right retraction
X <- X exp(delta). The gauge is fixed by a stiff prior on the first keyframe.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from .geometry import (
    Pose,
    adjoint,
    adjoint_batch,
    between,
    exp_batch,
    log,
    log_batch,
    orthonormalize_batch,
    right_jacobian_inv,
    right_jacobian_inv_batch,
)
from .pcm import LOOP_CLOSURE, ODOMETRY, RelativePoseMeasurement

logger = logging.getLogger(__name__)

PRIOR_SIGMA2 = 1e-6


class GraphError(ValueError):
    pass


@dataclass
class PoseGraph:
    nodes: dict[int, Pose]
    edges: list[RelativePoseMeasurement]
    prior: tuple[int, Pose, np.ndarray]

    def validate(self) -> None:
        if self.prior[0] not in self.nodes:
            raise GraphError("prior key is not a node")
        adj: dict[int, set[int]] = {k: set() for k in self.nodes}
        for e in self.edges:
            if e.from_key not in self.nodes or e.to_key not in self.nodes:
                raise GraphError(f"edge {e.from_key}->{e.to_key} references a missing node")
            adj[e.from_key].add(e.to_key)
            adj[e.to_key].add(e.from_key)
        seen = {self.prior[0]}
        stack = [self.prior[0]]
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        if len(seen) != len(self.nodes):
            raise GraphError(f"graph is disconnected ({len(self.nodes) - len(seen)} unreachable nodes)")


@dataclass
class OptimizerReport:
    iterations: int
    initial_error: float
    final_error: float
    converged: bool
    message: str = ""
    damping_retries: int = 0


def build_graph(odometry: Sequence[RelativePoseMeasurement], inlier_loops: Sequence[RelativePoseMeasurement] = (),
                initial_guess_source: Pose | Mapping[int, Pose] | None = None) -> PoseGraph:
    """Chain the odometry, attach the loops and place the prior on the first key.

    ``initial_guess_source`` is either the anchor pose of the first keyframe
    (nodes are then dead-reckoned from it) or a full mapping key -> Pose.
    """
    odometry = sorted(odometry, key=lambda e: e.from_key)
    if not odometry:
        raise GraphError("pose graph needs at least one odometry edge")
    for a, b in zip(odometry, odometry[1:]):
        if b.from_key != a.to_key:
            raise GraphError(f"odometry chain broken between {a.to_key} and {b.from_key}")
    first = odometry[0].from_key
    if isinstance(initial_guess_source, Mapping):
        nodes = {k: initial_guess_source[k] for k in [first] + [e.to_key for e in odometry]}
    else:
        anchor = initial_guess_source if initial_guess_source is not None else Pose.identity()
        nodes = {first: anchor}
        for e in odometry:
            nodes[e.to_key] = nodes[e.from_key] @ e.relative_pose
    graph = PoseGraph(nodes, list(odometry) + list(inlier_loops), (first, nodes[first], PRIOR_SIGMA2 * np.eye(6)))
    graph.validate()
    return graph


def edge_residual(Xi: Pose, Xj: Pose, Z: Pose) -> np.ndarray:
    return log(between(Z, between(Xi, Xj)), strict=False)


def edge_jacobians(Xi: Pose, Xj: Pose, Z: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its derivatives w.r.t. right perturbations of Xi and Xj."""
    r = edge_residual(Xi, Xj, Z)
    Jinv = right_jacobian_inv(r)
    Jj = Jinv
    Ji = -Jinv @ adjoint(between(Xj, Xi))
    return r, Ji, Jj


def _whitener(cov: np.ndarray) -> np.ndarray:
    info = np.linalg.inv(cov)
    info = 0.5 * (info + info.T)
    return np.linalg.cholesky(info).T


_R6 = np.repeat(np.arange(6), 6)
_C6 = np.tile(np.arange(6), 6)


class _Problem:
    """Edges as stacked arrays; poses as (n, 3, 3) rotations and (n, 3) translations.

    The prior is treated as one more edge from a virtual fixed node.
    """

    def __init__(self, graph: PoseGraph):
        self.keys = sorted(graph.nodes)
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.n = len(self.keys)
        E = graph.edges
        self.I = np.array([self.index[e.from_key] for e in E], dtype=np.int64)
        self.J = np.array([self.index[e.to_key] for e in E], dtype=np.int64)
        self.ZR = np.array([e.relative_pose.R for e in E]).reshape(-1, 3, 3)
        self.Zt = np.array([e.relative_pose.t for e in E]).reshape(-1, 3)
        self.W = np.array([_whitener(e.covariance) for e in E]).reshape(-1, 6, 6)
        pk, ppose, pcov = graph.prior
        self.pk = self.index[pk]
        self.prior = ppose
        self.pW = _whitener(pcov)

    def state(self, nodes) -> tuple[np.ndarray, np.ndarray]:
        R = np.array([nodes[k].R for k in self.keys]).reshape(-1, 3, 3)
        t = np.array([nodes[k].t for k in self.keys]).reshape(-1, 3)
        return R, t

    def residuals(self, R, t):
        Ri, Rj = R[self.I], R[self.J]
        ti, tj = t[self.I], t[self.J]
        Rrel = np.einsum("nji,njk->nik", Ri, Rj)
        trel = np.einsum("nji,nj->ni", Ri, tj - ti)
        Rres = np.einsum("nji,njk->nik", self.ZR, Rrel)
        tres = np.einsum("nji,nj->ni", self.ZR, trel - self.Zt)
        r = log_batch(Rres, tres) if len(self.I) else np.zeros((0, 6))
        rp = log(between(self.prior, Pose(R[self.pk], t[self.pk])), strict=False)
        return r, rp

    def error(self, R, t) -> float:
        r, rp = self.residuals(R, t)
        wr = np.einsum("nij,nj->ni", self.W, r)
        wp = self.pW @ rp
        return float(np.sum(wr * wr) + wp @ wp)

    def linearize(self, R, t):
        r, rp = self.residuals(R, t)
        n6 = 6 * self.n
        b = np.zeros((self.n, 6))
        rows, cols, vals = [], [], []

        def put(a, c, blocks):
            rows.append((6 * a[:, None] + _R6).ravel())
            cols.append((6 * c[:, None] + _C6).ravel())
            vals.append(blocks.reshape(len(a), 36).ravel())

        err = 0.0
        if len(self.I):
            Jinv = right_jacobian_inv_batch(r)
            Ri, Rj = R[self.I], R[self.J]
            Rb = np.einsum("nji,njk->nik", Rj, Ri)
            tb = np.einsum("nji,nj->ni", Rj, t[self.I] - t[self.J])
            Ji = -Jinv @ adjoint_batch(Rb, tb)
            WJi, WJj = self.W @ Ji, self.W @ Jinv
            wr = np.einsum("nij,nj->ni", self.W, r)
            err = float(np.sum(wr * wr))
            tr = lambda M: np.swapaxes(M, 1, 2)  # noqa: E731
            put(self.I, self.I, tr(WJi) @ WJi)
            put(self.J, self.J, tr(WJj) @ WJj)
            put(self.I, self.J, tr(WJi) @ WJj)
            put(self.J, self.I, tr(WJj) @ WJi)
            np.add.at(b, self.I, np.einsum("nji,nj->ni", WJi, wr))
            np.add.at(b, self.J, np.einsum("nji,nj->ni", WJj, wr))
        Jp = self.pW @ right_jacobian_inv(rp)
        wp = self.pW @ rp
        err += float(wp @ wp)
        k = np.array([self.pk])
        put(k, k, (Jp.T @ Jp)[None])
        b[self.pk] += Jp.T @ wp
        H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n6, n6))
        return H, b.ravel(), err


def _solve(H: sp.csc_matrix, rhs: np.ndarray, damping: float) -> np.ndarray:
    if damping:
        H = H + damping * sp.identity(H.shape[0], format="csc")
    # minimum-degree ordering on the symmetric pattern
    x = splu(H, permc_spec="MMD_AT_PLUS_A").solve(rhs)
    if not np.all(np.isfinite(x)):
        raise RuntimeError("non-finite solution")
    return x


def _retract(R, t, delta):
    dR, dt = exp_batch(delta.reshape(-1, 6))
    return orthonormalize_batch(R @ dR), t + np.einsum("nij,nj->ni", R, dt)


def optimize(graph: PoseGraph, max_iters: int = 50, tol: float = 1e-9, step_tol: float = 1e-10):
    graph.validate()
    prob = _Problem(graph)
    R, t = prob.state(graph.nodes)
    err0 = prob.error(R, t)
    report = OptimizerReport(0, err0, err0, False)
    err = err0

    def result():
        return {k: Pose(R[i], t[i]) for i, k in enumerate(prob.keys)}

    if err0 == 0.0:
        report.converged = True
        report.message = "zero residual"
        return result(), report

    for it in range(1, max_iters + 1):
        H, b, err = prob.linearize(R, t)
        delta = None
        damping = 0.0
        for attempt in range(4):
            try:
                delta = _solve(H, -b, damping)
                break
            except RuntimeError as exc:
                report.damping_retries += 1
                damping = 1e-9 if damping == 0.0 else damping * 100.0
                logger.debug("normal equations failed (%s); damping %.1e", exc, damping)
        if delta is None:
            report.message = "normal-equation solve failed after damping retries"
            report.iterations = it
            break

        # backtrack so accepted steps never increase the error
        step = 1.0
        while True:
            Rn, tn = _retract(R, t, step * delta)
            err_new = prob.error(Rn, tn)
            if err_new <= err or step < 1e-3:
                break
            step *= 0.5
        report.iterations = it
        if err_new > err:
            report.converged = True
            report.message = "no further decrease"
            break
        R, t = Rn, tn
        decrease = (err - err_new) / max(err, 1e-300)
        err = err_new
        if np.abs(step * delta).max() < step_tol:
            report.converged = True
            report.message = "step below tolerance"
            break
        if decrease < tol:
            report.converged = True
            report.message = "relative decrease below tolerance"
            break
    else:
        report.message = "max iterations reached"

    report.final_error = err
    return result(), report


# ---------------------------------------------------------------- g2o text format

def _pose_fields(p: Pose) -> list[float]:
    q = Rotation.from_matrix(p.R).as_quat()  # x y z w
    return [*p.t, *q]


def _pose_from_fields(v: Sequence[float]) -> Pose:
    return Pose(Rotation.from_quat(v[3:7]).as_matrix(), v[:3])


# ours is (rotation, translation); g2o stores (translation, rotation)
_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_g2o(path, graph: PoseGraph) -> None:
    lines = []
    for k in sorted(graph.nodes):
        lines.append(" ".join(["VERTEX_SE3:QUAT", str(k)] + [_fmt(v) for v in _pose_fields(graph.nodes[k])]))
    for e in graph.edges:
        info = np.linalg.inv(e.covariance)[np.ix_(_G2O_PERM, _G2O_PERM)]
        upper = info[np.triu_indices(6)]
        lines.append(" ".join(["EDGE_SE3:QUAT", str(e.from_key), str(e.to_key)]
                              + [_fmt(v) for v in _pose_fields(e.relative_pose)]
                              + [_fmt(v) for v in upper]))
    lines.append(f"FIX {graph.prior[0]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_g2o(path) -> PoseGraph:
    nodes: dict[int, Pose] = {}
    edges = []
    fixed = None
    for raw in Path(path).read_text().splitlines():
        tok = raw.split()
        if not tok:
            continue
        tag = tok[0]
        if tag == "VERTEX_SE3:QUAT":
            nodes[int(tok[1])] = _pose_from_fields([float(v) for v in tok[2:9]])
        elif tag == "EDGE_SE3:QUAT":
            i, j = int(tok[1]), int(tok[2])
            vals = [float(v) for v in tok[3:]]
            info = np.zeros((6, 6))
            info[np.triu_indices(6)] = vals[7:28]
            info = info + np.triu(info, 1).T
            inv_perm = np.argsort(_G2O_PERM)
            cov = np.linalg.inv(info[np.ix_(inv_perm, inv_perm)])
            kind = ODOMETRY if j == i + 1 else LOOP_CLOSURE
            edges.append(RelativePoseMeasurement(i, j, _pose_from_fields(vals[:7]), 0.5 * (cov + cov.T), kind))
        elif tag == "FIX":
            fixed = int(tok[1])
        else:
            raise ValueError(f"unsupported g2o record {tag!r}")
    if fixed is None:
        fixed = min(nodes)
    return PoseGraph(nodes, edges, (fixed, nodes[fixed], PRIOR_SIGMA2 * np.eye(6)))
