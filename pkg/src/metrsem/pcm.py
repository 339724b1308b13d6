"""Incremental pairwise-consistent loop-closure selection.

Loops are gated twice: each one must close a cycle with the odometry, and every
pair must close a cycle with each other through the odometry. The accepted set is
a maximum clique of the resulting consistency graph, maintained incrementally as
loops arrive (one new row and column per loop).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import (
    AngleNearPiError,
    Pose,
    adjoint,
    chi2_gate,
    compose_with_covariance,
    invert_with_covariance,
    log,
    mahalanobis_sq,
)

log_ = logging.getLogger(__name__)

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"


class BrokenChainError(ValueError):
    """The odometry does not connect the requested keyframes."""


@dataclass(frozen=True, eq=False)
class RelativePoseMeasurement:
    from_key: int
    to_key: int
    relative_pose: Pose
    covariance: np.ndarray
    kind: str = LOOP_CLOSURE

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float).reshape(6, 6)
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        if self.kind not in (ODOMETRY, LOOP_CLOSURE):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.from_key == self.to_key:
            raise ValueError("measurement endpoints must differ")
        if self.kind == ODOMETRY and self.to_key != self.from_key + 1:
            raise ValueError("odometry must connect consecutive keys")


@dataclass(frozen=True)
class PcmConfig:
    odometry_check_confidence: float = 0.99
    pairwise_check_confidence: float = 0.99
    dof: int = 6
    # above this many loops the clique search switches to the greedy heuristic
    exact_clique_limit: int = 1000

    def __post_init__(self):
        for c in (self.odometry_check_confidence, self.pairwise_check_confidence):
            if not 0.0 < c < 1.0:
                raise ValueError("confidence must lie in (0, 1)")


class OdometryChain:
    """Odometry edges over consecutive keys with prefix products.

    ``segment(a, b)`` returns the composed relative pose and its first-order
    covariance in O(1): with P_k the dead-reckoned pose of key k and
    S_k the running sum of Adj(P_{m+1}) Sigma_m Adj(P_{m+1})^T, the segment
    covariance is Adj(P_b^-1) (S_b - S_a) Adj(P_b^-1)^T.
    """

    def __init__(self, edges: Iterable[RelativePoseMeasurement] = ()):
        self.first_key: int | None = None
        self._poses: list[Pose] = []
        self._sums: list[np.ndarray] = []
        for e in sorted(edges, key=lambda e: e.from_key):
            self.append(e)

    @classmethod
    def coerce(cls, odometry) -> OdometryChain:
        if isinstance(odometry, OdometryChain):
            return odometry
        if isinstance(odometry, Mapping):
            odometry = odometry.values()
        return cls(odometry)

    @property
    def last_key(self) -> int | None:
        if self.first_key is None:
            return None
        return self.first_key + len(self._poses) - 1

    def __len__(self):
        return max(len(self._poses) - 1, 0)

    def append(self, edge: RelativePoseMeasurement) -> None:
        if edge.kind != ODOMETRY:
            raise ValueError("only odometry edges belong in the chain")
        if self.first_key is None:
            self.first_key = edge.from_key
            self._poses.append(Pose.identity())
            self._sums.append(np.zeros((6, 6)))
        if edge.from_key != self.last_key:
            raise BrokenChainError(f"odometry edge {edge.from_key}->{edge.to_key} does not extend key {self.last_key}")
        pose = self._poses[-1] @ edge.relative_pose
        A = adjoint(pose)
        self._poses.append(pose)
        self._sums.append(self._sums[-1] + A @ edge.covariance @ A.T)

    def pose(self, key: int) -> Pose:
        return self._poses[self._index(key)]

    def _index(self, key: int) -> int:
        if self.first_key is None or not self.first_key <= key <= self.last_key:
            raise BrokenChainError(f"key {key} not covered by odometry")
        return key - self.first_key

    def segment(self, a: int, b: int) -> tuple[Pose, np.ndarray]:
        ia, ib = self._index(a), self._index(b)
        if ia == ib:
            return Pose.identity(), np.zeros((6, 6))
        lo, hi = min(ia, ib), max(ia, ib)
        Ph = self._poses[hi]
        Ainv = adjoint(Ph.inverse())
        cov = Ainv @ (self._sums[hi] - self._sums[lo]) @ Ainv.T
        cov = 0.5 * (cov + cov.T)
        pose = self._poses[lo].inverse() @ Ph
        if ia < ib:
            return pose, cov
        return invert_with_covariance(pose, cov)


def _cycle_distance(parts: Sequence[tuple[Pose, np.ndarray]]) -> float:
    pose, cov = parts[0]
    for p, c in parts[1:]:
        pose, cov = compose_with_covariance(pose, cov, p, c)
    try:
        r = log(pose)
    except AngleNearPiError:
        # a cycle that turns by ~pi is as inconsistent as it gets
        return math.inf
    return mahalanobis_sq(r, cov)


def _gate(d2: float, dof: int, confidence: float) -> bool:
    return math.isfinite(d2) and chi2_gate(d2, dof, confidence)


def odometry_cycle_distance(loop: RelativePoseMeasurement, odometry) -> float:
    chain = OdometryChain.coerce(odometry)
    seg = chain.segment(loop.from_key, loop.to_key)
    inv_loop = invert_with_covariance(loop.relative_pose, loop.covariance)
    return _cycle_distance([seg, inv_loop])


def odometry_consistency_check(loop: RelativePoseMeasurement, odometry, cfg: PcmConfig = PcmConfig()) -> bool:
    d2 = odometry_cycle_distance(loop, odometry)
    return _gate(d2, cfg.dof, cfg.odometry_check_confidence)


def pairwise_cycle_distance(loop_i: RelativePoseMeasurement, loop_j: RelativePoseMeasurement, odometry) -> float:
    """Cycle i.from -> i.to ~> j.to -> j.from ~> i.from (~> is odometry)."""
    chain = OdometryChain.coerce(odometry)
    parts = [
        (loop_i.relative_pose, loop_i.covariance),
        chain.segment(loop_i.to_key, loop_j.to_key),
        invert_with_covariance(loop_j.relative_pose, loop_j.covariance),
        chain.segment(loop_j.from_key, loop_i.from_key),
    ]
    return _cycle_distance(parts)


def pairwise_consistency_check(loop_i, loop_j, odometry, cfg: PcmConfig = PcmConfig()) -> bool:
    d2 = pairwise_cycle_distance(loop_i, loop_j, odometry)
    return _gate(d2, cfg.dof, cfg.pairwise_check_confidence)


@dataclass
class ConsistencyMatrix:
    """Symmetric boolean adjacency over the loops seen so far.

    The diagonal holds each loop's odometry-check outcome; a loop that failed
    keeps its index but gets an all-false row and column.
    """

    adjacency: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    pairwise_checks: int = 0
    odometry_checks: int = 0

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    def __len__(self):
        return self.size

    @property
    def odometry_ok(self) -> np.ndarray:
        return np.diag(self.adjacency).copy()

    def grow(self) -> int:
        L = self.size
        A = np.zeros((L + 1, L + 1), dtype=bool)
        A[:L, :L] = self.adjacency
        self.adjacency = A
        return L

    def copy(self) -> ConsistencyMatrix:
        return ConsistencyMatrix(self.adjacency.copy(), self.pairwise_checks, self.odometry_checks)


def add_loop(matrix: ConsistencyMatrix, new_loop, all_prior_loops, odometry, cfg: PcmConfig = PcmConfig()) -> ConsistencyMatrix:
    """Append one loop: one odometry check, then one pairwise check per earlier loop.

    Pairwise checks are skipped for earlier loops that failed their own
    odometry check, but are still counted, so N loops always cost
    N (N - 1) / 2 pairwise evaluations of the bookkeeping counter.
    """
    if len(all_prior_loops) != matrix.size:
        raise ValueError("prior loop list does not match the matrix dimension")
    chain = OdometryChain.coerce(odometry)
    ok_diag = matrix.odometry_ok
    k = matrix.grow()
    matrix.odometry_checks += 1
    ok = odometry_consistency_check(new_loop, chain, cfg)
    matrix.adjacency[k, k] = ok
    for i, prior in enumerate(all_prior_loops):
        matrix.pairwise_checks += 1
        if not (ok and ok_diag[i]):
            continue
        if pairwise_consistency_check(prior, new_loop, chain, cfg):
            matrix.adjacency[i, k] = matrix.adjacency[k, i] = True
    return matrix


def build_matrix(loops, odometry, cfg: PcmConfig = PcmConfig()) -> ConsistencyMatrix:
    """Batch construction of the full matrix (every pair checked from scratch)."""
    chain = OdometryChain.coerce(odometry)
    L = len(loops)
    A = np.zeros((L, L), dtype=bool)
    for i, lp in enumerate(loops):
        A[i, i] = odometry_consistency_check(lp, chain, cfg)
    for i in range(L):
        for j in range(i + 1, L):
            if A[i, i] and A[j, j]:
                A[i, j] = A[j, i] = pairwise_consistency_check(loops[i], loops[j], chain, cfg)
    return ConsistencyMatrix(A, L * (L - 1) // 2, L)


# ---------------------------------------------------------------- max clique

def _bitsets(adjacency: np.ndarray) -> tuple[list[int], list[int]]:
    ok = np.flatnonzero(np.diag(adjacency))
    nbrs = []
    okset = set(ok.tolist())
    for v in range(adjacency.shape[0]):
        bits = 0
        if v in okset:
            for u in np.flatnonzero(adjacency[v]):
                if u != v and u in okset:
                    bits |= 1 << int(u)
        nbrs.append(bits)
    return ok.tolist(), nbrs


def _iter_bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


def _degeneracy_order(vertices: list[int], nbrs: list[int]) -> list[int]:
    remaining = set(vertices)
    mask = sum(1 << v for v in vertices)
    order = []
    while remaining:
        v = min(remaining, key=lambda u: ((nbrs[u] & mask).bit_count(), u))
        order.append(v)
        remaining.remove(v)
        mask &= ~(1 << v)
    return order


def _greedy_clique(vertices: list[int], nbrs: list[int]) -> list[int]:
    clique: list[int] = []
    cand = sum(1 << v for v in vertices)
    for v in reversed(_degeneracy_order(vertices, nbrs)):
        if cand >> v & 1:
            clique.append(v)
            cand &= nbrs[v]
    return sorted(clique)


def _color_bound(cand: int, nbrs: list[int]) -> int:
    """Number of colors in a greedy coloring of the candidate set."""
    colors = 0
    uncolored = cand
    while uncolored:
        colors += 1
        avail = uncolored
        while avail:
            low = avail & -avail
            v = low.bit_length() - 1
            uncolored &= ~low
            avail &= ~low & ~nbrs[v]
    return colors


def max_clique(matrix: ConsistencyMatrix | np.ndarray, greedy: bool | None = None,
               exact_limit: int = PcmConfig.exact_clique_limit) -> set[int]:
    """Maximum clique among loops that passed the odometry check.

    Exact branch and bound, seeded with a greedy clique taken in degeneracy
    order. Among cliques of maximum size the lexicographically smallest sorted
    index tuple is returned: candidates are expanded in increasing index order
    and the incumbent is only replaced by strictly larger cliques.
    """
    A = matrix.adjacency if isinstance(matrix, ConsistencyMatrix) else np.asarray(matrix, dtype=bool)
    vertices, nbrs = _bitsets(A)
    if not vertices:
        return set()
    if greedy is None:
        greedy = len(A) > exact_limit
    seed = _greedy_clique(vertices, nbrs)
    if greedy:
        return set(seed)

    best: list[int] = []
    best_size = len(seed) - 1

    def expand(current: list[int], cand: int):
        nonlocal best, best_size
        if len(current) > best_size:
            best, best_size = list(current), len(current)
        while cand:
            if len(current) + _color_bound(cand, nbrs) <= best_size:
                return
            low = cand & -cand
            v = low.bit_length() - 1
            cand ^= low
            current.append(v)
            expand(current, cand & nbrs[v])
            current.pop()

    expand([], sum(1 << v for v in vertices))
    return set(best)


def select_inliers(matrix: ConsistencyMatrix, loops: Sequence, **kwargs) -> tuple[list, list]:
    keep = max_clique(matrix, **kwargs)
    inliers = [lp for i, lp in enumerate(loops) if i in keep]
    outliers = [lp for i, lp in enumerate(loops) if i not in keep]
    return inliers, outliers


class IncrementalPcm:
    """Online front door: feed odometry and loops as they arrive."""

    def __init__(self, cfg: PcmConfig = PcmConfig()):
        self.cfg = cfg
        self.chain = OdometryChain()
        self.loops: list[RelativePoseMeasurement] = []
        self.matrix = ConsistencyMatrix()
        self._pending: list[RelativePoseMeasurement] = []

    def add_odometry(self, edge: RelativePoseMeasurement) -> None:
        self.chain.append(edge)
        # loops whose endpoints were ahead of the odometry are admitted now
        ready = [lp for lp in self._pending if max(lp.from_key, lp.to_key) <= self.chain.last_key]
        if ready:
            done = {id(lp) for lp in ready}
            self._pending = [lp for lp in self._pending if id(lp) not in done]
            for lp in ready:
                self._admit(lp)

    def add_loop(self, loop: RelativePoseMeasurement) -> None:
        last = self.chain.last_key
        if last is None or max(loop.from_key, loop.to_key) > last:
            self._pending.append(loop)
        else:
            self._admit(loop)

    def _admit(self, loop):
        add_loop(self.matrix, loop, self.loops, self.chain, self.cfg)
        self.loops.append(loop)

    def inliers(self) -> list[RelativePoseMeasurement]:
        return select_inliers(self.matrix, self.loops, exact_limit=self.cfg.exact_clique_limit)[0]
