"""SE(3) / so(3) arithmetic, first-order covariance transport and chi-squared gating.

Tangent vectors are ordered (rotation, translation) everywhere in this package,
and so are 6x6 covariances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammainc

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-8
LOG_PI_MARGIN = 1e-6


class AngleNearPiError(ValueError):
    """Raised when log is requested for a rotation too close to pi."""


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    if np.abs(R.T @ R - np.eye(3)).max() <= ORTHO_TOL:
        return R
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def act(self, points) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self):
        rv = log_so3(self.R) if rotation_angle(self.R) < math.pi - LOG_PI_MARGIN else vee(self.R)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(_orthonormalize(a.R @ b.R), a.R @ b.t + a.t)


def between(a: Pose, b: Pose) -> Pose:
    """a^-1 * b."""
    return Pose(_orthonormalize(a.R.T @ b.R), a.R.T @ (b.t - a.t))


def rotation_angle(R: np.ndarray) -> float:
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


# ---------------------------------------------------------------- so(3)

def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = math.sin(theta) / theta
    b = 2.0 * math.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * W + b * W @ W


def log_so3(R: np.ndarray, strict: bool = True) -> np.ndarray:
    """Rotation vector of R.

    With ``strict`` (the default) angles within 1e-6 of pi raise; otherwise the
    axis is read off the symmetric part, whose sign is arbitrary exactly at pi.
    """
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if strict and theta >= math.pi - LOG_PI_MARGIN:
        raise AngleNearPiError(f"rotation angle {theta:.9f} too close to pi")
    sv = vee(R - R.T)  # 2 sin(theta) u
    if theta < SMALL_ANGLE:
        return 0.5 * sv
    if theta < 2.5:
        return theta / (2.0 * math.sin(theta)) * sv
    # near pi the skew part is ill-conditioned; read the axis off the symmetric part
    B = 0.5 * (R + R.T) - math.cos(theta) * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    u = B[:, k] / math.sqrt(B[k, k] * (1.0 - math.cos(theta)))
    if u @ sv < 0:
        u = -u
    return theta * u


def left_jacobian_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    if theta < 1e-4:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    b = 2.0 * math.sin(0.5 * theta) ** 2 / theta**2
    c = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * W @ W


# ---------------------------------------------------------------- se(3)

def exp(xi) -> Pose:
    """Exponential map; xi = (rotation vector, translational part)."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    return Pose(exp_so3(w), left_jacobian_so3(w) @ v)


def log(p: Pose, strict: bool = True) -> np.ndarray:
    w = log_so3(p.R, strict)
    v = np.linalg.solve(left_jacobian_so3(w), p.t)
    return np.concatenate([w, v])


def adjoint(p: Pose) -> np.ndarray:
    """Adj such that exp(Adj @ xi) == p * exp(xi) * p^-1."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.R
    A[3:, 3:] = p.R
    A[3:, :3] = skew(p.t) @ p.R
    return A


def ad(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    A[:3, :3] = skew(xi[:3])
    A[3:, 3:] = skew(xi[:3])
    A[3:, :3] = skew(xi[3:])
    return A


def _q_block(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    W, Vs = skew(w), skew(v)
    WV = W @ Vs
    VW = Vs @ W
    WVW = WV @ W
    if theta < 0.05:
        t2, t4 = theta2, theta2 * theta2
        c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (0.5 * theta2 + c - 1.0) / theta**4
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (0.5 * Vs + c1 * (WV + VW + WVW)
            + c2 * (W @ WV + VW @ W - 3.0 * WVW)
            + c3 * (WVW @ W + W @ WVW))


def left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    J = np.zeros((6, 6))
    Jw = left_jacobian_so3(xi[:3])
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _q_block(xi[:3], xi[3:])
    return J


def right_jacobian(xi) -> np.ndarray:
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi) -> np.ndarray:
    """Derivative of log(exp(xi) * exp(eta)) with respect to eta at eta = 0."""
    return np.linalg.inv(right_jacobian(xi))


# ---------------------------------------------------------------- noise

def invert_with_covariance(p: Pose, cov: np.ndarray) -> tuple[Pose, np.ndarray]:
    """Inverse of a right-perturbed pose: p^-1 carries Adj(p) cov Adj(p)^T."""
    A = adjoint(p)
    return p.inverse(), A @ cov @ A.T


def compose_with_covariance(a: Pose, cov_a: np.ndarray, b: Pose, cov_b: np.ndarray):
    Ab = adjoint(b.inverse())
    return compose(a, b), Ab @ cov_a @ Ab.T + cov_b


def propagate_covariance_along_cycle(edges) -> np.ndarray:
    """First-order covariance of the product of right-perturbed poses.

    Each edge covariance is carried to the end of the chain through the
    adjoint of the remaining product, then all contributions are summed.
    """
    edges = list(edges)
    if not edges:
        raise ValueError("empty cycle")
    total_pose, total_cov = edges[0][0], np.asarray(edges[0][1], dtype=float)
    for pose, cov in edges[1:]:
        total_pose, total_cov = compose_with_covariance(total_pose, total_cov, pose, np.asarray(cov, dtype=float))
    return 0.5 * (total_cov + total_cov.T)


def mahalanobis_sq(r: np.ndarray, cov: np.ndarray) -> float:
    r = np.asarray(r, dtype=float)
    return float(r @ np.linalg.solve(cov, r))


# ---------------------------------------------------------------- chi-squared

def chi2_cdf(x: float, dof: int) -> float:
    if x <= 0:
        return 0.0
    return float(gammainc(0.5 * dof, 0.5 * x))


@lru_cache(maxsize=256)
def chi2_threshold(dof: int, confidence: float) -> float:
    """Inverse CDF of chi-squared(dof) found by bisection."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    lo, hi = 0.0, float(dof)
    while chi2_cdf(hi, dof) < confidence:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < confidence:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return hi


def chi2_gate(squared_mahalanobis: float, dof: int, confidence: float) -> bool:
    if not (math.isfinite(squared_mahalanobis) and math.isfinite(confidence)):
        raise ValueError("non-finite input to chi2_gate")
    return squared_mahalanobis <= chi2_threshold(int(dof), float(confidence))


# ---------------------------------------------------------------- batched
# Leading-axis versions of the maps above, used by the optimizer's inner loop.

def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _theta(w: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ni,ni->n", w, w))


def exp_so3_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    th = _theta(w)
    W = skew_batch(w)
    small = th < SMALL_ANGLE
    ts = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(ts) / ts)
    b = np.where(small, 0.5, 2.0 * np.sin(0.5 * ts) ** 2 / ts**2)
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * (W @ W)


def left_jacobian_so3_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    th = _theta(w)
    W = skew_batch(w)
    small = th < 1e-4
    ts = np.where(small, 1.0, th)
    b = np.where(small, 0.5, 2.0 * np.sin(0.5 * ts) ** 2 / ts**2)
    c = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / ts**3)
    return np.eye(3) + b[:, None, None] * W + c[:, None, None] * (W @ W)


def log_so3_batch(R: np.ndarray) -> np.ndarray:
    """Non-strict log for a stack of rotations."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    sv = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = 0.5 * np.linalg.norm(sv, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    th = np.arctan2(s, c)
    small = th < SMALL_ANGLE
    big = th >= 2.5
    scale = np.where(small | big, 0.5, th / (2.0 * np.where(small | big, 1.0, np.sin(th))))
    out = scale[:, None] * sv
    for k in np.flatnonzero(big):
        out[k] = log_so3(R[k], strict=False)
    return out


def q_block_batch(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    th2 = np.einsum("ni,ni->n", w, w)
    th = np.sqrt(th2)
    W, Vs = skew_batch(w), skew_batch(v)
    WV, VW = W @ Vs, Vs @ W
    WVW = WV @ W
    small = th < 0.05
    t = np.where(small, 1.0, th)
    s, co = np.sin(t), np.cos(t)
    t2, t4 = th2, th2 * th2
    c1 = np.where(small, 1 / 6 - t2 / 120 + t4 / 5040, (t - s) / t**3)
    c2 = np.where(small, 1 / 24 - t2 / 720 + t4 / 40320, (0.5 * t**2 + co - 1.0) / t**4)
    c3 = np.where(small, 1 / 120 - t2 / 2520 + t4 / 120960, (2.0 * t - 3.0 * s + t * co) / (2.0 * t**5))
    e = (slice(None), None, None)
    return (0.5 * Vs + c1[e] * (WV + VW + WVW) + c2[e] * (W @ WV + VW @ W - 3.0 * WVW)
            + c3[e] * (WVW @ W + W @ WVW))


def log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    w = log_so3_batch(R)
    v = np.linalg.solve(left_jacobian_so3_batch(w), np.asarray(t, dtype=float).reshape(-1, 3, 1))[..., 0]
    return np.concatenate([w, v], axis=1)


def exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    R = exp_so3_batch(xi[:, :3])
    t = np.einsum("nij,nj->ni", left_jacobian_so3_batch(xi[:, :3]), xi[:, 3:])
    return R, t


def right_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    xi = -np.asarray(xi, dtype=float).reshape(-1, 6)
    J = np.zeros((len(xi), 6, 6))
    Jw = left_jacobian_so3_batch(xi[:, :3])
    J[:, :3, :3] = Jw
    J[:, 3:, 3:] = Jw
    J[:, 3:, :3] = q_block_batch(xi[:, :3], xi[:, 3:])
    return np.linalg.inv(J)


def adjoint_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    A = np.zeros((len(R), 6, 6))
    A[:, :3, :3] = R
    A[:, 3:, 3:] = R
    A[:, 3:, :3] = skew_batch(t) @ R
    return A


def orthonormalize_batch(R: np.ndarray) -> np.ndarray:
    drift = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max(axis=(1, 2))
    bad = np.flatnonzero(drift > ORTHO_TOL)
    if len(bad):
        R = R.copy()
        for k in bad:
            R[k] = _orthonormalize(R[k])
    return R
