"""Shared builders for tests."""
import numpy as np

from metrsem.geometry import Pose, between, exp
from metrsem.pcm import LOOP_CLOSURE, ODOMETRY, RelativePoseMeasurement


def random_pose(rng, max_angle=3.0, scale=2.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * rng.uniform(0.0, max_angle)
    return exp(np.concatenate([w, rng.normal(scale=scale, size=3)]))


def chain(poses, cov=None):
    cov = 1e-4 * np.eye(6) if cov is None else cov
    return [RelativePoseMeasurement(k, k + 1, between(poses[k], poses[k + 1]), cov, ODOMETRY)
            for k in range(len(poses) - 1)]


def loop(poses, i, j, cov=None, offset=None):
    cov = 1e-4 * np.eye(6) if cov is None else cov
    Z = between(poses[i], poses[j])
    if offset is not None:
        Z = Z @ Pose(np.eye(3), offset)
    return RelativePoseMeasurement(i, j, Z, cov, LOOP_CLOSURE)


def walk(rng, n, step=0.5, turn=0.3):
    out = [Pose.identity()]
    for _ in range(n - 1):
        out.append(out[-1] @ exp(np.concatenate([rng.normal(scale=turn, size=3) * [0.1, 0.1, 1.0],
                                                 [step, 0.0, 0.0]])))
    return out
