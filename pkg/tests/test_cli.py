import copy
import json

import numpy as np
import pytest

from vinesim.bench import run_bench, scaled_setup
from vinesim.cli import main
from vinesim.io import read_trajectory
from vinesim.scenes import builtin_scene_data, builtin_scene_path

CIRCLE = str(builtin_scene_path("circle"))
WALL = str(builtin_scene_path("wall"))
OSCILLATION = str(builtin_scene_path("oscillation"))


def write_scene(tmp_path, data, name="scene.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_simulate_zero_steps_writes_initial_frame(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    assert main(["simulate", "--scene", CIRCLE, "--steps", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 30
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 0


def test_simulate_summary_and_dt_override(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    assert main(["simulate", "--scene", WALL, "--steps", "5", "--dt", "0.01", "--out", str(out)]) == 0
    traj = read_trajectory(out)
    assert len(traj) == 6 and traj.dt == pytest.approx(0.01)
    summary = json.loads(capsys.readouterr().out)
    assert summary["bodies"] == 10 and summary["max_joint_residual"] < 1e-6


def test_malformed_scene_exit_code_names_key(tmp_path, capsys):
    data = builtin_scene_data("circle")
    data["model"]["stifness"] = 1.0
    assert main(["simulate", "--scene", write_scene(tmp_path, data)]) == 2
    assert "stifness" in capsys.readouterr().err


def test_bad_json_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{\n")
    assert main(["validate", "--scene", str(path)]) == 2
    assert "line" in capsys.readouterr().err


def test_bad_arguments_exit_code(capsys):
    assert main(["simulate"]) == 2
    assert main(["simulate", "--scene", CIRCLE, "--steps", "-1"]) == 2
    assert main(["bench", "--bodies", "ten,20"]) == 2
    assert main(["bench", "--bodies", "20,10"]) == 2


def test_infeasible_simulation_exit_code(tmp_path, capsys):
    data = {
        "model": {"body_count": 2, "total_mass": 0.1, "nominal_length": 0.2},
        "scene": {"gravity": [0, 0], "obstacles": [{"type": "half_plane", "point": [0.2, 0], "normal": [-1, 0]}]},
        "sim": {"steps": 5},
        "input": {"type": "uniform", "total_rate": 0.1},
    }
    out = tmp_path / "partial.csv"
    assert main(["simulate", "--scene", write_scene(tmp_path, data), "--out", str(out)]) == 3
    assert "step 0" in capsys.readouterr().err
    assert len(read_trajectory(out)) == 1


def test_render_command(tmp_path, capsys):
    traj = tmp_path / "traj.csv"
    assert main(["simulate", "--scene", CIRCLE, "--steps", "20", "--out", str(traj)]) == 0
    frames = tmp_path / "frames"
    assert main(["render", str(traj), "--scene", CIRCLE, "--out", str(frames), "--stride", "10"]) == 0
    assert sorted(p.name for p in frames.iterdir()) == ["frame_00000.svg", "frame_00010.svg", "frame_00020.svg"]
    # trajectory from a different model
    assert main(["render", str(traj), "--scene", WALL, "--out", str(frames)]) == 2
    assert main(["render", str(traj), "--scene", CIRCLE, "--out", str(frames), "--stride", "0"]) == 2


def test_validate_command(tmp_path, capsys):
    assert main(["validate", "--scene", CIRCLE]) == 0
    assert capsys.readouterr().out.strip().endswith("ok")
    data = builtin_scene_data("circle")
    data["scene"]["obstacles"][0]["radius"] = 0.005
    assert main(["validate", "--scene", write_scene(tmp_path, data)]) == 0
    assert "warning" in capsys.readouterr().out


def test_bench_command(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--bodies", "4,8", "--steps", "5", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert [r["body_count"] for r in report["rows"]] == [4, 8]
    assert "slope" in capsys.readouterr().out


def test_bench_report_helpers():
    report = run_bench([4, 6], steps=3, repeats=2)
    assert report.row(6).steps == 3 and report.row(6).repeats == 2
    assert report.ratio(6, 4) > 0
    assert all(r.deterministic for r in report.rows)
    assert "bodies" in report.table()
    with pytest.raises(ValueError):
        run_bench([4])
    data = copy.deepcopy(builtin_scene_data("circle"))
    data["model"]["stiffness"] = [0.1] * 14
    with pytest.raises(ValueError):
        scaled_setup(data, 20)


def test_synth_then_fit_end_to_end(tmp_path, capsys):
    ref = tmp_path / "ref.csv"
    assert main(["synth", "--scene", OSCILLATION, "--out", str(ref), "--start", "25", "--seed", "3"]) == 0
    out = tmp_path / "fit"
    assert main(["fit", "--scene", OSCILLATION, "--ref", str(ref), "--out", str(out)]) == 0
    summary = json.loads((out / "fit.json").read_text())
    assert summary["converged"]
    assert summary["stiffness"] == pytest.approx(0.2, rel=0.1)
    assert summary["damping"] == pytest.approx(0.05, rel=0.2)
    assert summary["tip_mae"] < 2e-3
    traj = read_trajectory(out / "trajectory.csv")
    assert len(traj) == 101 and np.isfinite(traj.q).all()
    assert "K =" in capsys.readouterr().out


def test_fit_with_malformed_reference(tmp_path, capsys):
    ref = tmp_path / "ref.csv"
    ref.write_text("frame,t,point_index,x\n")
    assert main(["fit", "--scene", OSCILLATION, "--ref", str(ref), "--out", str(tmp_path / "o")]) == 2
