"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .evalkit import associate, ate_rmse, mesh_accuracy_completeness
from .pcm import LOOP_CLOSURE, ODOMETRY, IncrementalPcm
from .pgo import build_graph, optimize, read_g2o, write_g2o
from .pipeline import (
    ConfigError,
    Modules,
    PipelineError,
    dump_config,
    load_config,
    run,
    simulate,
    sweep,
    write_sweep_csv,
)
from .semantics import integrate_semantic, write_palette
from .simworld import Intrinsics, Scene, backproject, render, rng_stream
from .volumetric import VoxelGrid, extract_surface

log = logging.getLogger("metrsem")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- intrinsics file

def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text("# fx fy cx cy width height\n"
                          f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n")


def read_intrinsics(path) -> Intrinsics:
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            v = line.split()
            if len(v) != 6:
                raise ValueError("intrinsics file needs: fx fy cx cy width height")
            return Intrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))
    raise ValueError("empty intrinsics file")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands

def _config(args, **overrides):
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    if getattr(args, "serial", False):
        overrides["serial"] = True
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, seed=args.seed))
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = cfg.load_scene()
    data = simulate(cfg.sim, scene)
    scene.write(out / "scene.txt")
    write_intrinsics(out / "intrinsics.txt", cfg.sim.intrinsics)
    write_palette(out / "palette.txt")
    (out / "config.ini").write_text(dump_config(cfg))
    fileio.write_tum(out / "groundtruth.tum", data.stamps, data.gt)
    fileio.write_tum(out / "odometry.tum", data.stamps, data.dead_reckoning())
    if data.odometry:
        write_g2o(out / "measurements.g2o", build_graph(data.odometry, data.loops, data.gt[0]))
    # ground-truth loop labels are kept apart from the measurements on purpose
    (out / "loop_labels.txt").write_text("# from to is_inlier\n" + "".join(
        f"{lc.from_key} {lc.to_key} {int(f)}\n" for lc, f in zip(data.loops, data.loop_is_inlier)))
    if args.images:
        img = out / "images"
        img.mkdir(exist_ok=True)
        rng = rng_stream(cfg.sim.seed, "depth_noise")
        for k, pose in enumerate(data.gt):
            depth, labels = render(scene, pose, cfg.sim.intrinsics, rng, cfg.sim.depth_noise)
            fileio.write_depth_pgm(img / f"depth_{k:06d}.pgm", depth)
            fileio.write_label_pgm(img / f"label_{k:06d}.pgm", labels)
    print(f"wrote simulation with {len(data.gt)} keyframes and {len(data.loops)} loops to {out}")
    return 0


def cmd_slam(args) -> int:
    if args.g2o:
        graph = read_g2o(args.g2o)
        odo = sorted((e for e in graph.edges if e.kind == ODOMETRY), key=lambda e: e.from_key)
        loops = [e for e in graph.edges if e.kind == LOOP_CLOSURE]
        accepted = loops
        if not args.no_pcm:
            pcm = IncrementalPcm()
            for e in odo:
                pcm.add_odometry(e)
            for lc in loops:
                pcm.add_loop(lc)
            accepted = pcm.inliers()
        g = build_graph(odo, accepted, graph.nodes)
        result, report = optimize(g)
        out = Path(args.out or "out")
        out.mkdir(parents=True, exist_ok=True)
        write_g2o(out / "optimized.g2o", dataclasses.replace(g, nodes=result))
        print(json.dumps({"loops": len(loops), "accepted": len(accepted), "iterations": report.iterations,
                          "initial_error": report.initial_error, "final_error": report.final_error,
                          "converged": report.converged}, indent=2))
        return 0
    cfg = _config(args)
    mods = Modules(pcm=not args.no_pcm, pgo=True, mesher=False, volumetric=False, eval=True)
    res = run(dataclasses.replace(cfg, modules=mods))
    print(res.report.to_json(), end="")
    return 0


def _indexed_images(folder: Path, prefix: str) -> list[Path]:
    return sorted(folder.glob(f"{prefix}_*.pgm"))


def cmd_fuse(args) -> int:
    folder = Path(args.images)
    depths = _indexed_images(folder, "depth")
    labels = _indexed_images(folder, "label")
    if len(depths) != len(labels):
        raise UsageError("depth and label image counts differ")
    _, poses = fileio.read_tum(args.poses)
    if len(poses) < len(depths):
        raise UsageError("fewer poses than images")
    intr = read_intrinsics(args.intrinsics)
    grid = VoxelGrid(args.voxel_size, args.truncation)
    for k, (d, lab) in enumerate(zip(depths, labels)):
        depth = fileio.read_depth_pgm(d)
        if depth.shape != (intr.height, intr.width):
            raise UsageError(f"{d.name}: image size does not match intrinsics")
        integrate_semantic(grid, backproject(depth, fileio.read_pgm(lab), intr, poses[k]))
    mesh = extract_surface(grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_ply(out, mesh)
    print(f"{sha256(out)}  {out}  ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return 0


def cmd_eval(args) -> int:
    ts_e, est = fileio.read_tum(args.est)
    ts_g, gt = fileio.read_tum(args.gt)
    if args.by_index:
        if len(est) != len(gt):
            raise UsageError("trajectories differ in length")
        pairs = [(i, i) for i in range(len(est))]
    else:
        pairs = associate(ts_e, ts_g, args.max_dt)
    if not pairs:
        raise UsageError("no associated poses")
    out = {"ate_rmse": ate_rmse([est[i] for i, _ in pairs], [gt[j] for _, j in pairs]), "n_pairs": len(pairs)}
    if args.mesh:
        if not args.scene:
            raise UsageError("--mesh needs --scene for the ground-truth surface")
        pts, _ = Scene.read(args.scene).sample_surface(args.density)
        s = mesh_accuracy_completeness(fileio.read_ply(args.mesh), pts, args.density, args.icp_threshold, args.icp)
        out.update(mesh_accuracy_rmse=s.accuracy, mesh_completeness_rmse=s.completeness)
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.json:
        Path(args.json).write_text(text)
    print(text, end="")
    return 0


def _rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise argparse.ArgumentTypeError("rates must lie in [0, 1]")
    return rates


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = sweep(cfg, args.outlier_rates, args.outlier_mode)
    out = Path(args.csv) if args.csv else Path(cfg.output_dir) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, rows)
    print(out.read_text(), end="")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run(cfg)
    for name in sorted(res.files):
        print(res.files[name])
    return 0


def cmd_config(args) -> int:
    print(dump_config(_config(args)), end="")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metrsem", description="Metric-semantic SLAM back end on a synthetic world.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI config file (see README)")
        sp.add_argument("--seed", type=int, help="override the simulation seed")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("simulate", help="generate trajectory, measurements and optionally images")
    common(sp)
    sp.add_argument("--images", action="store_true", help="also write depth/label PGM images")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("slam", help="PCM + pose-graph optimization")
    common(sp)
    sp.add_argument("--g2o", help="optimize this g2o graph instead of a simulation")
    sp.add_argument("--no-pcm", action="store_true", help="accept every loop closure")
    sp.add_argument("--serial", action="store_true")
    sp.set_defaults(func=cmd_slam)

    sp = sub.add_parser("fuse", help="semantic TSDF fusion of depth/label images into a mesh")
    sp.add_argument("--images", required=True, help="folder with depth_*.pgm and label_*.pgm")
    sp.add_argument("--poses", required=True, help="TUM trajectory, one pose per image in order")
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--out", required=True, help="output PLY")
    sp.add_argument("--voxel-size", type=float, default=0.10)
    sp.add_argument("--truncation", type=float, default=0.40)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval", help="ATE (and optionally mesh metrics) between two TUM files")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--by-index", action="store_true", help="pair poses by line instead of by timestamp")
    sp.add_argument("--max-dt", type=float, default=0.01, help="timestamp association tolerance [s]")
    sp.add_argument("--mesh", help="estimated mesh PLY")
    sp.add_argument("--scene", help="scene file providing the ground-truth surface")
    sp.add_argument("--density", type=float, default=1e3)
    sp.add_argument("--icp-threshold", type=float, default=1.0)
    sp.add_argument("--icp", action="store_true")
    sp.add_argument("--json", help="also write the result here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="ATE vs outlier rate, with and without PCM")
    common(sp)
    sp.add_argument("--outlier-rates", type=_rates, default=[0.0, 0.2, 0.5, 0.8])
    sp.add_argument("--outlier-mode", choices=["augment", "replace"], default="augment")
    sp.add_argument("--csv", help="CSV path (default: <out>/sweep.csv)")
    sp.add_argument("--serial", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("run", help="full pipeline with all enabled modules")
    common(sp)
    sp.add_argument("--serial", action="store_true", help="run both lanes on one thread")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("config", help="print the effective configuration")
    common(sp, out=False)
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"metrsem {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, OSError, ValueError, RuntimeError) as exc:
        print(f"metrsem {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
