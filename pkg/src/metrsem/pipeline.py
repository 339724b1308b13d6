"""End-to-end orchestration: simulate, PCM + PGO, meshing, semantic TSDF, evaluation.

Two lanes mirror the multi-rate design. The keyframe lane ingests odometry,
renders the sensor data and maintains the landmark meshes. The slow lane
runs outlier rejection, pose-graph optimization and volumetric fusion. They talk
through a bounded queue; a full queue blocks the producer. Every message is an
immutable snapshot, so the slow lane sees the same inputs in the same order
whether it runs on its own thread or inline (``serial``).
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import fileio
from .evalkit import MetricsReport, TimingProbe, ate_rmse, mesh_accuracy_completeness, semantic_metrics
from .geometry import Pose
from .mesher import TriangleMesh, fuse_multi_frame, per_frame_mesh
from .pcm import IncrementalPcm, PcmConfig, RelativePoseMeasurement
from .pgo import GraphError, build_graph, optimize, write_g2o
from .semantics import integrate_semantic
from .simworld import (
    Intrinsics,
    Scene,
    SimConfig,
    backproject,
    corrupt_odometry,
    generate_landmarks,
    generate_loops,
    generate_trajectory,
    render,
    rng_stream,
    timestamps,
    track_features,
    visible_from,
)
from .volumetric import VoxelGrid, extract_surface

logger = logging.getLogger(__name__)

SEED_ENV = "METRSEM_SEED"


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 50
    tol: float = 1e-9


@dataclass(frozen=True)
class GridConfig:
    voxel_size: float = 0.10
    truncation_distance: float = 0.40
    max_weight: float = 1e4
    num_classes: int = 8
    min_weight: float = 1e-4


@dataclass(frozen=True)
class MesherConfig:
    horizon: int = 10
    max_edge_length: float = 1.5


@dataclass(frozen=True)
class Modules:
    pcm: bool = True
    pgo: bool = True
    mesher: bool = True
    volumetric: bool = True
    eval: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    sim: SimConfig = SimConfig()
    pcm: PcmConfig = PcmConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    grid: GridConfig = GridConfig()
    mesher: MesherConfig = MesherConfig()
    modules: Modules = Modules()
    pgo_every: int = 10
    tsdf_pose_source: str = "estimate"
    queue_size: int = 4
    serial: bool = False
    scene: str = "room"
    output_dir: str = "out"
    mesh_density: float = 1e3
    icp: bool = False

    def __post_init__(self):
        if self.pgo_every < 1:
            raise ConfigError("pgo_every must be >= 1")
        if self.tsdf_pose_source not in ("estimate", "ground_truth"):
            raise ConfigError("tsdf_pose_source must be 'estimate' or 'ground_truth'")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be >= 1")

    def load_scene(self) -> Scene:
        if self.scene == "room":
            return Scene.default_room()
        if self.scene == "empty":
            return Scene([])
        return Scene.read(self.scene)


# ---------------------------------------------------------------- config file

_SECTIONS = ("sim", "pcm", "optimizer", "grid", "mesher", "modules")


def _coerce(text: str, like: Any, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = text.replace(",", " ").split()
            if len(parts) != len(like):
                raise ValueError(text)
            return tuple(type(x)(p) for x, p in zip(like, parts))
        return text
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _apply(obj, items: dict[str, str], section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    kw = {}
    for k, v in items.items():
        if k not in names:
            raise ConfigError(f"unknown key {section}.{k}")
        kw[k] = _coerce(v, getattr(obj, k), f"{section}.{k}")
    try:
        return dataclasses.replace(obj, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """INI-style config. Sections: [pipeline] [sim] [intrinsics] [pcm] [optimizer]
    [grid] [mesher] [modules]. Unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or PipelineConfig()
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "pipeline":
            for k in items:
                if k in _SECTIONS:
                    raise ConfigError(f"unknown key pipeline.{k}")
            cfg = _apply(cfg, items, "pipeline")
        elif section == "intrinsics":
            intr = _apply(cfg.sim.intrinsics, items, "intrinsics")
            cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, intrinsics=intr))
        elif section in _SECTIONS:
            sub = _apply(getattr(cfg, section), items, section)
            cfg = dataclasses.replace(cfg, **{section: sub})
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg


def load_config(path: str | os.PathLike | None = None, env: dict | None = None, **overrides) -> PipelineConfig:
    cfg = parse_config(Path(path).read_text()) if path else PipelineConfig()
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, seed=seed))
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["[pipeline]"]
    nested = set(_SECTIONS)
    for f in dataclasses.fields(cfg):
        if f.name not in nested:
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for sec in _SECTIONS:
        lines.append(f"\n[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            if f.name == "intrinsics":
                continue
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines.append("\n[intrinsics]")
    for f in dataclasses.fields(Intrinsics):
        lines.append(f"{f.name} = {getattr(cfg.sim.intrinsics, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- simulation bundle

@dataclass
class SimData:
    scene: Scene
    gt: list[Pose]
    stamps: np.ndarray
    odometry: list[RelativePoseMeasurement]
    loops: list[RelativePoseMeasurement]
    loop_is_inlier: np.ndarray  # evaluation only; never handed to PCM

    def dead_reckoning(self) -> list[Pose]:
        if not self.gt:
            return []
        out = [self.gt[0]]
        for e in self.odometry:
            out.append(out[-1] @ e.relative_pose)
        return out


def simulate(cfg: SimConfig, scene: Scene) -> SimData:
    gt = generate_trajectory(cfg)
    loops, flags = generate_loops(gt, cfg) if len(gt) > 1 and cfg.n_loops else ([], np.zeros(0, dtype=bool))
    return SimData(scene, gt, timestamps(cfg, len(gt)), corrupt_odometry(gt, cfg), loops, flags)


# ---------------------------------------------------------------- lanes

@dataclass(frozen=True)
class KeyframeMsg:
    key: int
    gt_pose: Pose
    odometry: RelativePoseMeasurement | None
    loops: tuple[RelativePoseMeasurement, ...]
    depth: np.ndarray | None
    labels: np.ndarray | None


_STOP = object()


class _SlowLane:
    """PCM + PGO every ``pgo_every`` keyframes, then TSDF + semantics for the keyframe."""

    def __init__(self, cfg: PipelineConfig, timing: TimingProbe, anchor: Pose | None):
        self.cfg = cfg
        self.timing = timing
        self.pcm = IncrementalPcm(cfg.pcm)
        self.odometry: list[RelativePoseMeasurement] = []
        self.loops: list[RelativePoseMeasurement] = []
        self.anchor = anchor
        self.estimate: dict[int, Pose] = {}
        self.grid = VoxelGrid(cfg.grid.voxel_size, cfg.grid.truncation_distance, cfg.grid.max_weight,
                              cfg.grid.num_classes, cfg.grid.min_weight)
        self.reports = []
        self.n_keyframes = 0

    # pose of key k given the last optimization: optimized pose of the newest
    # optimized key, followed by raw odometry
    def current_pose(self, k: int) -> Pose:
        if k in self.estimate:
            return self.estimate[k]
        base = max((j for j in self.estimate if j < k), default=None)
        if base is None:
            pose, base = self.anchor, 0
        else:
            pose = self.estimate[base]
        for e in self.odometry[base:k]:
            pose = pose @ e.relative_pose
        return pose

    def accepted_loops(self) -> list[RelativePoseMeasurement]:
        if not self.cfg.modules.pcm:
            return list(self.loops)
        return self.pcm.inliers()

    def run_pgo(self) -> None:
        if not self.cfg.modules.pgo or not self.odometry:
            return
        with self.timing.time("pgo"):
            try:
                graph = build_graph(self.odometry, self.accepted_loops(), self.anchor)
            except GraphError as exc:
                logger.warning("skipping optimization: %s", exc)
                return
            result, report = optimize(graph, self.cfg.optimizer.max_iters, self.cfg.optimizer.tol)
        self.estimate = result
        self.reports.append(report)

    def handle(self, msg: KeyframeMsg) -> None:
        self.n_keyframes += 1
        if self.anchor is None:
            self.anchor = msg.gt_pose
        if msg.odometry is not None:
            self.odometry.append(msg.odometry)
            if self.cfg.modules.pcm:
                self.pcm.add_odometry(msg.odometry)
        for lc in msg.loops:
            self.loops.append(lc)
            if self.cfg.modules.pcm:
                with self.timing.time("pcm"):
                    self.pcm.add_loop(lc)
        if (msg.key + 1) % self.cfg.pgo_every == 0:
            self.run_pgo()
        if self.cfg.modules.volumetric and msg.depth is not None:
            pose = msg.gt_pose if self.cfg.tsdf_pose_source == "ground_truth" else self.current_pose(msg.key)
            cloud = backproject(msg.depth, msg.labels, self.cfg.sim.intrinsics, pose)
            with self.timing.time("tsdf_semantic"):
                integrate_semantic(self.grid, cloud)

    def finish(self) -> None:
        if self.n_keyframes and (not self.reports or self.n_keyframes % self.cfg.pgo_every):
            self.run_pgo()


@dataclass
class RunResult:
    report: MetricsReport
    files: dict[str, Path] = field(default_factory=dict)
    estimate: list[Pose] = field(default_factory=list)
    odometry_estimate: list[Pose] = field(default_factory=list)
    multiframe_mesh: TriangleMesh | None = None
    global_mesh: TriangleMesh | None = None
    accepted_loops: list = field(default_factory=list)
    partial: bool = False


def run(cfg: PipelineConfig, write: bool = True, data: SimData | None = None) -> RunResult:
    """Run every enabled module and write the artifacts to ``cfg.output_dir``."""
    timing = TimingProbe()
    scene = cfg.load_scene()
    sim = data if data is not None else simulate(cfg.sim, scene)
    n = len(sim.gt)
    intr = cfg.sim.intrinsics
    need_images = cfg.modules.volumetric or cfg.modules.mesher
    landmarks = generate_landmarks(scene, cfg.sim) if cfg.modules.mesher else None
    depth_rng = rng_stream(cfg.sim.seed, "depth_noise")

    loops_at: dict[int, list] = {}
    for lc in sim.loops:
        loops_at.setdefault(lc.to_key, []).append(lc)

    gt_cloud = None
    gt_visible = None
    if cfg.modules.eval and (cfg.modules.volumetric or cfg.modules.mesher) and len(scene):
        gt_cloud, _ = scene.sample_surface(cfg.mesh_density)
        gt_visible = np.zeros(len(gt_cloud), dtype=bool)

    slow = _SlowLane(cfg, timing, sim.gt[0] if n else None)
    out_dir = Path(cfg.output_dir)
    multiframe = TriangleMesh()
    seen_at: dict[int, int] = {}
    errors: list[BaseException] = []

    q: queue.Queue = queue.Queue(maxsize=cfg.queue_size)

    def worker():
        while True:
            msg = q.get()
            if msg is _STOP:
                return
            if errors:
                continue
            try:
                slow.handle(msg)
            except BaseException as exc:  # surfaced to the caller after shutdown
                errors.append(exc)

    thread = None
    if not cfg.serial:
        thread = threading.Thread(target=worker, name="slow-lane", daemon=True)
        thread.start()

    try:
        for k in range(n):
            if errors:
                break
            pose = sim.gt[k]
            depth = labels = None
            if need_images:
                with timing.time("render"):
                    depth, labels = render(scene, pose, intr, depth_rng, cfg.sim.depth_noise)
                if gt_visible is not None:
                    gt_visible |= visible_from(gt_cloud, pose, depth, intr)
            if cfg.modules.mesher and landmarks is not None:
                feats = track_features(landmarks, pose, depth, intr, cfg.sim.max_features)
                for f in feats:
                    seen_at[f.landmark_id] = k
                horizon = {i for i, last in seen_at.items() if last > k - cfg.mesher.horizon}
                with timing.time("per_frame_mesh"):
                    frame_mesh = per_frame_mesh(feats, cfg.mesher.max_edge_length, labels)
                with timing.time("multiframe_fusion"):
                    multiframe = fuse_multi_frame(multiframe, frame_mesh, _EstimateView(landmarks), horizon)
            msg = KeyframeMsg(k, pose, sim.odometry[k - 1] if k else None, tuple(loops_at.get(k, ())),
                              depth if cfg.modules.volumetric else None,
                              labels if cfg.modules.volumetric else None)
            if cfg.serial:
                slow.handle(msg)
            else:
                q.put(msg)  # blocks while the slow lane is behind
    except BaseException as exc:
        errors.append(exc)
    finally:
        if thread is not None:
            q.put(_STOP)
            thread.join()

    partial = bool(errors)
    if not partial:
        try:
            slow.finish()
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            partial = True

    odo = sim.dead_reckoning()
    if cfg.modules.pgo and slow.estimate and not partial:
        est = [slow.estimate[k] for k in range(n)]
    else:
        est = odo
    result = RunResult(MetricsReport(), estimate=est, odometry_estimate=odo, partial=partial,
                       accepted_loops=slow.accepted_loops() if (cfg.modules.pcm or cfg.modules.pgo) else [])

    global_mesh = None
    if cfg.modules.volumetric:
        with timing.time("extract_surface"):
            global_mesh = extract_surface(slow.grid)
        result.global_mesh = global_mesh
    if cfg.modules.mesher:
        result.multiframe_mesh = multiframe

    report = result.report
    if cfg.modules.eval:
        _evaluate(cfg, sim, slow, result, gt_cloud, gt_visible, scene, timing)
    report.extra["partial"] = partial
    if errors:
        report.extra["error"] = f"{type(errors[0]).__name__}: {errors[0]}"
    report.timing = timing.stats()

    if write:
        result.files = _write_outputs(cfg, out_dir, sim, result, slow)
    if errors:
        raise PipelineError(str(errors[0])) from errors[0]
    return result


class _EstimateView:
    """Mapping landmark id -> current position estimate, without copying."""

    def __init__(self, lm):
        self.lm = lm

    def __getitem__(self, i):
        return self.lm.estimate[i]

    def __contains__(self, i):
        return 0 <= i < len(self.lm.ids)

    def get(self, i, default=None):
        return self[i] if i in self else default


def _evaluate(cfg, sim, slow, result, gt_cloud, gt_visible, scene, timing) -> None:
    report = result.report
    n = len(sim.gt)
    report.extra["n_keyframes"] = n
    report.extra["n_loops"] = len(sim.loops)
    report.extra["n_loops_true"] = int(sim.loop_is_inlier.sum())
    if n:
        report.ate_rmse = ate_rmse(result.estimate, sim.gt)
        report.ate_rmse_odometry = ate_rmse(result.odometry_estimate, sim.gt)
    if cfg.modules.pcm or cfg.modules.pgo:
        acc = {id(lc) for lc in result.accepted_loops}
        flags = [bool(f) for lc, f in zip(sim.loops, sim.loop_is_inlier) if id(lc) in acc]
        report.extra["n_accepted"] = len(flags)
        report.extra["n_accepted_outliers"] = int(len(flags) - sum(flags))
    if slow.reports:
        last = slow.reports[-1]
        report.extra["pgo_runs"] = len(slow.reports)
        report.extra["pgo_iterations"] = last.iterations
        report.extra["pgo_converged"] = last.converged
    if slow.grid.skipped_points:
        report.extra["skipped_points"] = slow.grid.skipped_points

    gt_pts = gt_cloud[gt_visible] if gt_cloud is not None else None
    have_gt = gt_pts is not None and len(gt_pts) > 0
    g = result.global_mesh
    if g is not None and not g.is_empty and have_gt:
        with timing.time("eval_mesh"):
            s = mesh_accuracy_completeness(g, gt_pts, cfg.mesh_density, 1.0, cfg.icp)
        report.mesh_accuracy_rmse, report.mesh_completeness_rmse = s.accuracy, s.completeness
        report.mesh_accuracy_rmse_all, report.mesh_completeness_rmse_all = s.accuracy_all, s.completeness_all
        if g.labels is not None and g.n_vertices:
            sc = semantic_metrics(g.labels, scene.nearest_surface_label(g.vertices), cfg.grid.num_classes)
            report.miou, report.acc = sc.miou, sc.acc
            report.per_class_iou = sc.per_class_iou
    m = result.multiframe_mesh
    if m is not None and not m.is_empty and have_gt and m.area() > 0:
        s = mesh_accuracy_completeness(m, gt_pts, cfg.mesh_density, 1.0, cfg.icp)
        report.multiframe_accuracy_rmse, report.multiframe_completeness_rmse = s.accuracy, s.completeness
    report.validate()


def _write_outputs(cfg, out_dir: Path, sim: SimData, result: RunResult, slow: _SlowLane) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    n = len(sim.gt)

    def put(name, fn):
        path = out_dir / name
        fn(path)
        files[name] = path

    put("groundtruth.tum", lambda p: fileio.write_tum(p, sim.stamps, sim.gt))
    put("odometry.tum", lambda p: fileio.write_tum(p, sim.stamps, result.odometry_estimate))
    if cfg.modules.pgo:
        put("optimized.tum", lambda p: fileio.write_tum(p, sim.stamps[:n], result.estimate))
        if slow.odometry:
            try:
                graph = build_graph(slow.odometry, slow.accepted_loops(), sim.gt[0])
                put("pose_graph.g2o", lambda p: write_g2o(p, graph))
            except GraphError:
                pass
    if cfg.modules.mesher and result.multiframe_mesh is not None:
        put("multiframe_mesh.ply", lambda p: fileio.write_ply(p, result.multiframe_mesh))
    if cfg.modules.volumetric and result.global_mesh is not None:
        put("global_mesh.ply", lambda p: fileio.write_ply(p, result.global_mesh))
    if cfg.modules.eval:
        put("metrics.json", lambda p: p.write_text(result.report.to_json()))
        put("timing.json", lambda p: p.write_text(json.dumps(result.report.timing, indent=2, sort_keys=True) + "\n"))
    return files


# ---------------------------------------------------------------- sweep

SWEEP_FIELDS = ("outlier_rate", "pcm", "ate_rmse", "n_loops", "n_loops_true", "n_accepted", "n_accepted_outliers")


def sweep(cfg: PipelineConfig, rates: Sequence[float], outlier_mode: str = "augment") -> list[dict]:
    """Paired with/without-PCM runs per outlier rate; trajectory modules only."""
    rows = []
    for rate in rates:
        sim_cfg = dataclasses.replace(cfg.sim, outlier_rate=float(rate), outlier_mode=outlier_mode)
        base = dataclasses.replace(cfg, sim=sim_cfg)
        data = simulate(sim_cfg, base.load_scene())
        for use_pcm in (True, False):
            mods = Modules(pcm=use_pcm, pgo=True, mesher=False, volumetric=False, eval=True)
            res = run(dataclasses.replace(base, modules=mods), write=False, data=data)
            ex = res.report.extra
            rows.append({"outlier_rate": float(rate), "pcm": "pcm" if use_pcm else "no-pcm",
                         "ate_rmse": res.report.ate_rmse, "n_loops": ex.get("n_loops", 0),
                         "n_loops_true": ex.get("n_loops_true", 0), "n_accepted": ex.get("n_accepted", 0),
                         "n_accepted_outliers": ex.get("n_accepted_outliers", 0)})
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    lines = [",".join(SWEEP_FIELDS)]
    for r in rows:
        lines.append(",".join("" if r[f] is None else (repr(r[f]) if isinstance(r[f], float) else str(r[f]))
                              for f in SWEEP_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")
