import dataclasses
import json
import threading
import time

import numpy as np
import pytest

import metrsem.pipeline as pipeline
from metrsem.fileio import read_tum
from metrsem.pipeline import (ConfigError, Modules, PipelineConfig, PipelineError, dump_config, load_config,
                              parse_config, run, simulate, sweep, write_sweep_csv)
from metrsem.simworld import Intrinsics, SimConfig

SMALL_SIM = SimConfig(n_keyframes=24, laps=2.0, n_loops=4, min_loop_separation=8, n_landmarks=600,
                      max_features=80, intrinsics=Intrinsics(40, 40, 40, 30, 80, 60))


def small(tmp_path, name="out", **kw):
    base = PipelineConfig(sim=SMALL_SIM, output_dir=str(tmp_path / name), pgo_every=5, serial=True)
    return dataclasses.replace(base, **kw)


class TestConfig:
    def test_defaults_parse(self):
        assert parse_config("") == PipelineConfig()

    def test_sections(self):
        cfg = parse_config("""
[pipeline]
pgo_every = 3
[sim]
n_keyframes = 12
center = 1 2 3
[intrinsics]
width = 64
[modules]
mesher = off
""")
        assert cfg.pgo_every == 3 and cfg.sim.n_keyframes == 12 and cfg.sim.center == (1.0, 2.0, 3.0)
        assert cfg.sim.intrinsics.width == 64 and not cfg.modules.mesher

    @pytest.mark.parametrize("text", ["[sim]\nbogus = 1\n", "[nosuch]\n", "[sim]\nn_keyframes = many\n",
                                      "[pipeline]\nsim = 1\n", "[pcm]\nodometry_check_confidence = 2\n",
                                      "[pipeline]\ntsdf_pose_source = lidar\n", "not an ini"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_dump_roundtrip(self):
        cfg = small(__import__("pathlib").Path("/tmp"), modules=Modules(mesher=False))
        assert parse_config(dump_config(cfg)) == cfg

    def test_env_seed(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[sim]\nseed = 5\n")
        assert load_config(p, env={}).sim.seed == 5
        assert load_config(p, env={"METRSEM_SEED": "17"}).sim.seed == 17
        with pytest.raises(ConfigError):
            load_config(p, env={"METRSEM_SEED": "x"})


class TestRun:
    def test_sim_only(self, tmp_path):
        cfg = small(tmp_path, modules=Modules(False, False, False, False, False))
        res = run(cfg)
        assert sorted(res.files) == ["groundtruth.tum", "odometry.tum"]
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["groundtruth.tum", "odometry.tum"]

    def test_all_artifacts(self, tmp_path):
        res = run(small(tmp_path))
        assert set(res.files) == {"groundtruth.tum", "odometry.tum", "optimized.tum", "pose_graph.g2o",
                                  "multiframe_mesh.ply", "global_mesh.ply", "metrics.json", "timing.json"}
        m = json.loads((tmp_path / "out" / "metrics.json").read_text())
        assert m["extra"]["partial"] is False
        assert 0 <= m["miou"] <= 1 and m["ate_rmse"] >= 0
        assert m["ate_rmse"] <= m["ate_rmse_odometry"]

    def test_noise_free_zero_ate(self, tmp_path):
        sim = SMALL_SIM.with_(sigma_rot=0, sigma_trans=0, loop_sigma_rot=0, loop_sigma_trans=0, outlier_rate=0)
        res = run(small(tmp_path, sim=sim, modules=Modules(mesher=False, volumetric=False)), write=False)
        assert res.report.ate_rmse < 1e-6

    def test_byte_determinism(self, tmp_path):
        a, b = small(tmp_path, "a"), small(tmp_path, "b")
        run(a)
        run(b)
        for name in ("optimized.tum", "multiframe_mesh.ply", "global_mesh.ply", "metrics.json", "pose_graph.g2o"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_threaded_matches_serial(self, tmp_path):
        s = run(small(tmp_path, "s"))
        t = run(small(tmp_path, "t", serial=False))
        ds, dt = s.report.to_dict(False), t.report.to_dict(False)
        for k, v in ds.items():
            if isinstance(v, float):
                assert abs(v - dt[k]) <= 1e-9, k
        assert (tmp_path / "s" / "global_mesh.ply").read_bytes() == (tmp_path / "t" / "global_mesh.ply").read_bytes()

    def test_isolation(self, tmp_path):
        full = small(tmp_path, "full")
        run(full)
        no_vol = small(tmp_path, "novol", modules=Modules(volumetric=False))
        run(no_vol)
        no_mesh = small(tmp_path, "nomesh", modules=Modules(mesher=False))
        run(no_mesh)
        for name in ("groundtruth.tum", "odometry.tum", "optimized.tum", "pose_graph.g2o"):
            ref = (tmp_path / "full" / name).read_bytes()
            assert (tmp_path / "novol" / name).read_bytes() == ref
            assert (tmp_path / "nomesh" / name).read_bytes() == ref
        assert ((tmp_path / "novol" / "multiframe_mesh.ply").read_bytes()
                == (tmp_path / "full" / "multiframe_mesh.ply").read_bytes())
        assert ((tmp_path / "nomesh" / "global_mesh.ply").read_bytes()
                == (tmp_path / "full" / "global_mesh.ply").read_bytes())
        no_eval = small(tmp_path, "noeval", modules=Modules(eval=False))
        run(no_eval)
        assert not (tmp_path / "noeval" / "metrics.json").exists()
        assert ((tmp_path / "noeval" / "global_mesh.ply").read_bytes()
                == (tmp_path / "full" / "global_mesh.ply").read_bytes())

    @pytest.mark.parametrize("sim", [SMALL_SIM.with_(n_keyframes=0), SMALL_SIM.with_(n_keyframes=1),
                                     SMALL_SIM.with_(n_loops=0)])
    def test_degenerate_sims(self, tmp_path, sim):
        res = run(small(tmp_path, sim=sim))
        assert not res.partial
        assert (tmp_path / "out" / "metrics.json").exists()
        assert len(read_tum(tmp_path / "out" / "groundtruth.tum")[1]) == sim.n_keyframes

    def test_empty_scene(self, tmp_path):
        res = run(small(tmp_path, scene="empty"))
        assert res.global_mesh.is_empty and res.multiframe_mesh.is_empty
        m = json.loads((tmp_path / "out" / "metrics.json").read_text())
        assert m["miou"] is None

    def test_ground_truth_pose_source(self, tmp_path):
        res = run(small(tmp_path, tsdf_pose_source="ground_truth"), write=False)
        assert res.report.mesh_accuracy_rmse < 0.06

    def test_failure_is_reported(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = pipeline.integrate_semantic

        def flaky(grid, cloud):
            calls["n"] += 1
            if calls["n"] == 5:
                raise RuntimeError("disk on fire")
            return real(grid, cloud)

        monkeypatch.setattr(pipeline, "integrate_semantic", flaky)
        for serial in (True, False):
            calls["n"] = 0
            out = "fail_serial" if serial else "fail_threaded"
            with pytest.raises(PipelineError, match="disk on fire"):
                run(small(tmp_path, out, serial=serial))
            m = json.loads((tmp_path / out / "metrics.json").read_text())
            assert m["extra"]["partial"] is True and "disk on fire" in m["extra"]["error"]

    def test_backpressure(self, tmp_path, monkeypatch):
        """With a one-slot queue the keyframe lane never runs more than two messages ahead."""
        handled = []
        produced = []
        real_handle = pipeline._SlowLane.handle
        real_put = pipeline.queue.Queue.put

        def slow_handle(self, msg):
            time.sleep(0.01)
            real_handle(self, msg)
            handled.append(msg.key)

        def put(self, item, *a, **k):
            real_put(self, item, *a, **k)
            if isinstance(item, pipeline.KeyframeMsg):
                produced.append((item.key, len(handled)))

        monkeypatch.setattr(pipeline._SlowLane, "handle", slow_handle)
        monkeypatch.setattr(pipeline.queue.Queue, "put", put)
        cfg = small(tmp_path, serial=False, queue_size=1, modules=Modules(mesher=False, volumetric=False))
        res = run(cfg, write=False)
        assert handled == list(range(SMALL_SIM.n_keyframes))
        # after put(k) returns, at most one message waits in the queue and one is being handled
        assert all(k - done <= 2 for k, done in produced)
        assert res.report.ate_rmse is not None


class TestSweep:
    def test_rows_and_csv(self, tmp_path):
        cfg = small(tmp_path)
        rows = sweep(cfg, [0.0, 0.5])
        assert [(r["outlier_rate"], r["pcm"]) for r in rows] == [(0.0, "pcm"), (0.0, "no-pcm"),
                                                                 (0.5, "pcm"), (0.5, "no-pcm")]
        assert rows[2]["n_loops"] == rows[2]["n_loops_true"] * 2
        write_sweep_csv(tmp_path / "s.csv", rows)
        lines = (tmp_path / "s.csv").read_text().strip().split("\n")
        assert len(lines) == 5 and lines[0].startswith("outlier_rate,pcm,ate_rmse")

    def test_simulate_deterministic(self):
        a = simulate(SMALL_SIM, pipeline.Scene.default_room())
        b = simulate(SMALL_SIM, pipeline.Scene.default_room())
        assert all(x.relative_pose.allclose(y.relative_pose, atol=0) for x, y in zip(a.loops, b.loops))
        assert np.array_equal(a.loop_is_inlier, b.loop_is_inlier)
