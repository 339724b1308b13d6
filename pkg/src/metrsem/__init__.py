"""Metric-semantic SLAM back end: robust pose-graph optimization with pairwise
consistency checks, landmark meshing, semantic TSDF fusion and evaluation on a
synthetic world."""
from .geometry import Pose, between, chi2_gate, compose, exp, log, propagate_covariance_along_cycle
from .mesher import TrackedFeature, TriangleMesh, delaunay_2d, fuse_multi_frame, per_frame_mesh
from .pcm import ConsistencyMatrix, IncrementalPcm, PcmConfig, RelativePoseMeasurement, add_loop, max_clique
from .pgo import PoseGraph, build_graph, optimize
from .pipeline import PipelineConfig, load_config, run, sweep
from .volumetric import LabeledPointCloud, VoxelGrid, extract_surface, integrate

__version__ = "0.1.0"

__all__ = [
    "ConsistencyMatrix", "IncrementalPcm", "LabeledPointCloud", "PcmConfig", "PipelineConfig", "Pose",
    "PoseGraph", "RelativePoseMeasurement", "TrackedFeature", "TriangleMesh", "VoxelGrid", "add_loop",
    "between", "build_graph", "chi2_gate", "compose", "delaunay_2d", "exp", "extract_surface",
    "fuse_multi_frame", "integrate", "load_config", "log", "max_clique", "optimize", "per_frame_mesh",
    "propagate_covariance_along_cycle", "run", "sweep",
]
