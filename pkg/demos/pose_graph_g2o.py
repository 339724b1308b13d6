"""Round trip through the g2o format: build a noisy pose graph, save it,
load it back and optimize.

    python3 demos/pose_graph_g2o.py [out.g2o]
"""
import sys

import numpy as np

from metrsem.geometry import Pose, exp
from metrsem.pcm import LOOP_CLOSURE, ODOMETRY, RelativePoseMeasurement
from metrsem.pgo import build_graph, optimize, read_g2o, write_g2o


def spiral(n):
    poses = []
    for k in range(n):
        a = 0.25 * k
        R = exp(np.array([0, 0, a, 0, 0, 0])).R
        poses.append(Pose(R, [2.0 * np.cos(a), 2.0 * np.sin(a), 0.02 * k]))
    return poses


def main(path="spiral.g2o"):
    rng = np.random.default_rng(0)
    truth = spiral(120)
    cov = np.diag([1e-4] * 3 + [4e-4] * 3)
    noisy = lambda i, j: truth[i].inverse() @ truth[j] @ exp(rng.multivariate_normal(np.zeros(6), cov))
    odo = [RelativePoseMeasurement(k, k + 1, noisy(k, k + 1), cov, ODOMETRY) for k in range(len(truth) - 1)]
    # one closure per revolution (2 pi / 0.25 ~ 25 keyframes)
    loops = [RelativePoseMeasurement(k, k + 25, noisy(k, k + 25), cov, LOOP_CLOSURE) for k in range(0, 95, 5)]
    write_g2o(path, build_graph(odo, loops, truth[0]))

    graph = read_g2o(path)
    est, report = optimize(graph)
    err = lambda poses: np.sqrt(np.mean([np.sum((poses[k].t - truth[k].t) ** 2) for k in range(len(truth))]))
    print(f"{path}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    print(f"dead reckoning error {err(graph.nodes):.3f} m -> optimized {err(est):.3f} m "
          f"in {report.iterations} iterations (chi2 {report.initial_error:.1f} -> {report.final_error:.1f})")


if __name__ == "__main__":
    main(*sys.argv[1:])
