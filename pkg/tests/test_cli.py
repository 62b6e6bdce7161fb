import json
import shutil

import numpy as np
import pytest

from hybrid_vio.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from hybrid_vio.dataset_io import read_trajectory, write_trajectory
from hybrid_vio.evaluation import validate_report_dict


@pytest.fixture(scope="module")
def cli_run(short_circle, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["run", "--dataset", str(short_circle), "--out", str(out), "--single-activity"]) == EXIT_OK
    return out


def test_run_writes_outputs(cli_run):
    traj = read_trajectory(cli_run / "trajectory.txt")
    assert len(traj) > 0
    header = (cli_run / "diagnostics.csv").read_text().splitlines()[0]
    assert header.startswith("index,t,features_event,features_frame")
    summary = json.loads((cli_run / "summary.json").read_text())
    assert summary["mode"] == "fr+e+i" and summary["single_activity"] is True


def test_run_events_mode_without_images(short_circle, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(short_circle, data)
    (data / "images.txt").unlink()
    shutil.rmtree(data / "images")
    assert main(["run", "--dataset", str(data), "--out", str(tmp_path / "ei"), "--mode", "e+i", "--single-activity"]) == EXIT_OK
    assert main(["run", "--dataset", str(data), "--out", str(tmp_path / "fi"), "--mode", "fr+i", "--single-activity"]) == EXIT_DATA


def test_config_errors_exit_2(short_circle, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("no_such_key: 1\n", encoding="utf-8")
    code = main(["run", "--dataset", str(short_circle), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_missing_dataset_exit_3(tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_simulate_same_seed_byte_identical(tmp_path):
    args = ["simulate", "--scenario", "hover", "--duration", "0.5", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert {"events.txt", "imu.txt", "images.txt", "groundtruth.txt", "calibration.yaml"} <= {str(f) for f in files}
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_simulate_unknown_scenario_key(tmp_path):
    cfg = tmp_path / "sc.yaml"
    cfg.write_text("preset: circle\nwobble: 3\n", encoding="utf-8")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_evaluate_identity_and_schema(short_circle, tmp_path):
    gt = str(short_circle / "groundtruth.txt")
    out = tmp_path / "ev"
    assert main(["evaluate", "--estimate", gt, "--groundtruth", gt, "--out", str(out), "--align-start", "0", "--align-end", "2.5"]) == EXIT_OK
    report = json.loads((out / "metrics.json").read_text())
    validate_report_dict(report)
    assert report["mean_position_error_pct"] < 1e-9
    assert report["mean_yaw_error_deg_per_m"] < 1e-9
    assert (out / "segments.csv").read_text().startswith("length_m,index,translation_pct,rotation_deg")


def test_evaluate_disjoint_ranges_exit_3(short_circle, tmp_path):
    gt = read_trajectory(short_circle / "groundtruth.txt")
    shifted = type(gt)(gt.t + 100.0, gt.positions, gt.quaternions)
    est = tmp_path / "est.txt"
    write_trajectory(est, shifted)
    code = main(["evaluate", "--estimate", str(est), "--groundtruth", str(short_circle / "groundtruth.txt"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert not np.isnan(shifted.t).any()
