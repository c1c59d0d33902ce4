import numpy as np
import pytest

from unislam.cli import main
from unislam.formats import read_tum

from conftest import ROOM_SCENARIO, ROOM_SLAM


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "room.cfg").write_text(ROOM_SCENARIO)
    (root / "slam.cfg").write_text("".join(f"{k} = {v}\n" for k, v in ROOM_SLAM.items()))
    assert main(["simulate", "--config", str(root / "room.cfg"), "--out", str(root / "sim")]) == 0
    code = main(
        [
            "slam",
            "--log", str(root / "sim" / "log.txt"),
            "--config", str(root / "slam.cfg"),
            "--out", str(root / "run"),
            "--ground-truth", str(root / "sim" / "ground_truth.tum"),
        ]
    )
    assert code == 0
    return root


def test_simulate_writes_log_and_ground_truth(cli_run):
    sim = cli_run / "sim"
    assert (sim / "log.txt").read_text().startswith("# format = unislam-log 1")
    times, poses = read_tum(sim / "ground_truth.tum")
    assert len(times) == len(poses) > 1000


def test_simulate_seed_override_changes_the_log(cli_run, tmp_path):
    assert main(["simulate", "--config", str(cli_run / "room.cfg"), "--seed", "11", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "log.txt").read_bytes() != (cli_run / "sim" / "log.txt").read_bytes()
    assert "# seed = 11" in (tmp_path / "log.txt").read_text()


def test_slam_writes_outputs_and_report(cli_run):
    run = cli_run / "run"
    for name in ("trajectory.tum", "map.ply", "graph.txt", "submaps.txt", "summary.txt", "report.txt", "report.kv"):
        assert (run / name).is_file(), name
    kv = dict(line.split(" = ") for line in (run / "report.kv").read_text().splitlines())
    assert float(kv["final_position_error_m"]) < 0.6


def test_eval_of_identical_files_reports_zero(cli_run, tmp_path, capsys):
    gt = str(cli_run / "sim" / "ground_truth.tum")
    assert main(["eval", "--estimate", gt, "--ground-truth", gt, "--out", str(tmp_path)]) == 0
    kv = dict(line.split(" = ") for line in (tmp_path / "report.kv").read_text().splitlines())
    assert float(kv["final_position_error_m"]) == 0.0
    assert float(kv["translational_drift_percent"]) == 0.0
    assert float(kv["mean_abs_yaw_error_deg"]) == 0.0
    assert "translational drift" in capsys.readouterr().out


def test_eval_matches_slam_report(cli_run, tmp_path):
    run = cli_run / "run"
    code = main(
        ["eval", "--trajectory", str(run / "trajectory.tum"), "--ground-truth", str(cli_run / "sim" / "ground_truth.tum"), "--out", str(tmp_path)]
    )
    assert code == 0
    # the TUM file keeps nine significant digits, so the numbers agree to that precision
    ours = dict(line.split(" = ") for line in (tmp_path / "report.kv").read_text().splitlines())
    slam = dict(line.split(" = ") for line in (run / "report.kv").read_text().splitlines())
    assert ours.keys() == slam.keys()
    for k in ours:
        assert float(ours[k]) == pytest.approx(float(slam[k]), rel=1e-6, abs=1e-7), k


def test_export_map_matches_slam_map(cli_run, tmp_path):
    out = tmp_path / "map.ply"
    assert main(["export-map", "--input", str(cli_run / "run"), "--out", str(out)]) == 0
    assert out.read_text() == (cli_run / "run" / "map.ply").read_text()


def test_export_plots_writes_error_series(cli_run, tmp_path):
    code = main(
        ["export-plots", "--trajectory", str(cli_run / "run" / "trajectory.tum"), "--ground-truth", str(cli_run / "sim" / "ground_truth.tum"), "--out", str(tmp_path)]
    )
    assert code == 0
    lines = (tmp_path / "errors.csv").read_text().splitlines()
    assert lines[0] == "t,err_x_m,err_y_m,err_z_m,err_roll_deg,err_pitch_deg,err_yaw_deg"
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert rows.shape[1] == 7 and len(rows) == len((cli_run / "run" / "trajectory.tum").read_text().splitlines())


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["simulate", "--out", "x"],
        ["simulate", "--config", "a", "--out", "x", "--seed", "-1"],
        ["simulate", "--config", "a", "--out", "x", "--seed", str(2**64)],
        ["eval", "--ground-truth", "g.tum"],
        ["slam", "--log", "l", "--config", "c", "--out", "o", "--bogus"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_missing_config_exits_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_malformed_log_exits_2(cli_run, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text((cli_run / "sim" / "log.txt").read_text() + "IMU 0.0 0 0 0 0 0 9.81\n")
    code = main(["slam", "--log", str(bad), "--config", str(cli_run / "slam.cfg"), "--out", str(tmp_path / "o")])
    assert code == 2


def test_eval_without_overlap_exits_2(cli_run, tmp_path):
    shifted = tmp_path / "shifted.tum"
    lines = (cli_run / "sim" / "ground_truth.tum").read_text().splitlines()
    shifted.write_text("".join(f"{float(l.split()[0]) + 1000} {' '.join(l.split()[1:])}\n" for l in lines))
    assert main(["eval", "--estimate", str(shifted), "--ground-truth", str(cli_run / "sim" / "ground_truth.tum")]) == 2

