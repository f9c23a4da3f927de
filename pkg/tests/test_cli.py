import csv
import json

import numpy as np
import pytest

from mcgs import cli, evalkit
from mcgs.geometry import load_trajectory
from mcgs.synth import read_png, read_raster

SYNTH = {"n_frames": 6}
FAST = {"window": 3, "mapping_iters": 2, "init_stride": 4, "map_window": 1, "mcba_iters": 5, "jdsa_iters": 2,
        "offline_epochs": 1, "offline_map_iters": 2, "keyframe_threshold_px": 1.0}


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    syn = write_json(root / "synth.json", SYNTH)
    cfg = write_json(root / "fast.json", FAST)
    assert cli.main(["synth", "--config", str(syn), "--out", str(root / "ds")]) == 0
    assert cli.main(["track", str(root / "ds"), "--config", str(cfg), "--out", str(root / "run")]) == 0
    assert cli.main(["refine", str(root / "run"), "--out", str(root / "ref")]) == 0
    return root


class TestSynth:
    def test_manifest_and_files(self, work):
        man = json.loads((work / "ds" / "manifest.json").read_text())
        assert man["n_frames"] == 6 and len(man["frames"]) == 6
        entry = man["frames"][2]["files"]["front"]
        img = read_png(work / "ds" / entry["png"])
        assert img.shape == (48, 64, 3)
        assert read_raster(work / "ds" / entry["depth"]).shape == (48, 64)
        stamps, poses = load_trajectory(work / "ds" / "groundtruth.txt")
        assert len(poses) == 6

    def test_deterministic(self, work, tmp_path):
        syn = write_json(tmp_path / "s.json", SYNTH)
        assert cli.main(["--config", str(syn), "synth", "--out", str(tmp_path / "again")]) == 0
        for rel in ("groundtruth.txt", "rig.json", "frames/left/000003.png", "frames/right/000005.depth"):
            assert (tmp_path / "again" / rel).read_bytes() == (work / "ds" / rel).read_bytes()

    def test_unknown_config_field(self, tmp_path):
        syn = write_json(tmp_path / "s.json", {"n_frame": 3})
        assert cli.main(["synth", "--config", str(syn), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG

    def test_missing_out(self):
        assert cli.main(["synth"]) == cli.EXIT_CONFIG


class TestTrack:
    def test_report_and_artifacts(self, work):
        rep = json.loads((work / "run" / "report.json").read_text())
        assert rep["metrics"]["ate_rmse"] < 1e-6
        assert len(rep["trajectory"]) == len(rep["keyframes"])
        man = json.loads((work / "run" / "manifest.json").read_text())
        for rel in man["artifacts"].values():
            assert (work / "run" / rel).exists()
        assert "timings" not in rep

    def test_no_jdsa(self, work, tmp_path):
        cfg = write_json(tmp_path / "c.json", FAST)
        out = tmp_path / "nj"
        assert cli.main(["track", str(work / "ds"), "--config", str(cfg), "--no-jdsa", "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["jdsa"] is False and rep["jdsa_traces"] == {}
        assert not (out / "grids.json").exists()

    def test_missing_rig_is_io_error(self, work, tmp_path):
        import shutil
        ds = tmp_path / "ds"
        shutil.copytree(work / "ds", ds)
        (ds / "rig.json").unlink()
        assert cli.main(["track", str(ds), "--out", str(tmp_path / "r")]) == cli.EXIT_IO

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["track", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == cli.EXIT_IO

    def test_invalid_config_value(self, work, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"window": 0})
        assert cli.main(["track", str(work / "ds"), "--config", str(cfg), "--out", str(tmp_path / "r")]) \
            == cli.EXIT_CONFIG

    def test_malformed_config_file(self, work, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert cli.main(["track", str(work / "ds"), "--config", str(tmp_path / "c.json"),
                         "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG

    def test_rerun_is_bitwise_identical(self, work, tmp_path):
        cfg = write_json(tmp_path / "c.json", FAST)
        out = tmp_path / "again"
        assert cli.main(["track", str(work / "ds"), "--config", str(cfg), "--deterministic", "--out", str(out)]) == 0
        for rel in ("trajectory.txt", "map.ply", "report.json"):
            assert (out / rel).read_bytes() == (work / "run" / rel).read_bytes()


class TestRefine:
    def test_converged_run_barely_moves(self, work):
        a = load_trajectory(work / "run" / "trajectory.txt")[1]
        b = load_trajectory(work / "ref" / "trajectory.txt")[1]
        for p, q in zip(a, b):
            assert np.abs(p.t - q.t).max() < 1e-6 and np.abs(p.q - q.q).max() < 1e-6
        rep = json.loads((work / "ref" / "report.json").read_text())
        assert rep["metrics"]["psnr_mean"] >= rep["online_metrics"]["psnr_mean"]

    def test_refine_twice(self, work, tmp_path):
        assert cli.main(["refine", str(work / "ref"), "--out", str(tmp_path / "ref2")]) == 0
        man = json.loads((tmp_path / "ref2" / "manifest.json").read_text())
        assert man["stage"] == "offline" and man["source"] == str((work / "ref").resolve())

    def test_missing_run(self, tmp_path):
        assert cli.main(["refine", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == cli.EXIT_IO


class TestEval:
    def test_against_itself(self, work, tmp_path):
        assert cli.main(["eval", str(work / "ref"), str(work / "ref"), "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["per_sequence"]["ds"]["ate_rmse"] < 1e-12

    def test_matches_library(self, work, tmp_path):
        assert cli.main(["eval", str(work / "ref"), str(work / "ds"), "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "table.csv")))
        assert rows[0] == ["Method", "Metric", "ds", "Avg"]
        run = cli.load_run(work / "ref")
        est = ([k.timestamp for k in run.keyframes], [k.pose for k in run.keyframes])
        ate = evalkit.ate_rmse(est, load_trajectory(work / "ds" / "groundtruth.txt"))
        assert float(rows[1][2]) == ate
        vm = cli.view_metrics_for(run.keyframes, run.map, run.dataset.rig, run.exposures)
        assert float(rows[2][2]) == vm["psnr_mean"] and float(rows[3][2]) == vm["ssim_mean"]
        assert (tmp_path / "trajectory_plot.csv").exists()

    def test_missing_reference(self, work, tmp_path):
        assert cli.main(["eval", str(work / "ref"), str(tmp_path), "--out", str(tmp_path / "e")]) == cli.EXIT_IO


class TestRender:
    def test_writes_view(self, work, tmp_path):
        out = tmp_path / "v" / "kf1.png"
        assert cli.main(["render", str(work / "ref"), "--keyframe", "1", "--camera", "left", "--out", str(out)]) == 0
        assert read_png(out).shape == (48, 64, 3)
        assert read_raster(out.with_suffix(".depth")).shape == (48, 64)

    @pytest.mark.parametrize("args", [["--keyframe", "99"], ["--camera", "rear"]])
    def test_bad_selection(self, work, tmp_path, args):
        assert cli.main(["render", str(work / "ref"), *args, "--out", str(tmp_path / "x.png")]) == cli.EXIT_CONFIG


def test_flags_before_and_after_subcommand(tmp_path):
    p = cli.build_parser()
    a = p.parse_args(["--seed", "3", "--out", str(tmp_path), "synth"])
    b = p.parse_args(["synth", "--seed", "3", "--out", str(tmp_path)])
    assert a.seed == b.seed == 3 and a.out == b.out == tmp_path
