import json

import pytest

from flocinv.cli import main
from flocinv.domain import Grid
from flocinv.forward import read_trajectory_csv
from flocinv.harness import truth_measure
from flocinv.measures import load_measure, save_measure, uniform


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_forward(tmp_path, capsys):
    code, out, _ = run(["forward", "--n", 6, "--out", tmp_path, "--stride", 50], capsys)
    assert code == 0
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t," + ",".join(f"x_{i}" for i in range(1, 7))
    traj = read_trajectory_csv(tmp_path / "trajectory.csv", 1.0)
    assert traj.times[-1] == 1.0 and len(traj.times) == 5


def test_generate_then_invert(tmp_path, capsys):
    code, out, _ = run(["generate-data", "--n", 5, "--sigma", 0.0, "--out", tmp_path], capsys)
    assert code == 0
    code, out, _ = run(["invert", "--observations", tmp_path / "observations.json", "--out", tmp_path], capsys)
    assert code == 0
    summary = json.loads(out)
    assert float(summary["cost"]) < 1e-6
    est = load_measure(tmp_path / "estimate.json")
    assert est.daughter_grid.n_cells == 5
    assert (tmp_path / "estimate_history.csv").read_text().startswith("iter,cost\n")


def test_invert_from_truth_with_seed(tmp_path, capsys):
    args = ["invert", "--truth", "arcsine", "--n", 4, "--sigma", 0.1, "--seed", 7]
    assert run(args + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert run(args + ["--out", tmp_path / "b"], capsys)[0] == 0
    a = (tmp_path / "a" / "estimate_history.csv").read_bytes()
    assert a == (tmp_path / "b" / "estimate_history.csv").read_bytes()


def test_global_flags_before_subcommand(tmp_path, capsys):
    code, _, _ = run(["--out", tmp_path, "--seed", 3, "generate-data", "--n", 4, "--sigma", 0.1], capsys)
    assert code == 0
    assert json.loads((tmp_path / "observations.json").read_text())["rng_seed"] == 3


def test_study_and_manifest_replay(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_values": [4, 6], "truth": "beta22"}))
    code, out, _ = run(["--config", cfg, "study", "--out", tmp_path / "a"], capsys)
    assert code == 0 and len(out.splitlines()) == 2
    code, _, _ = run(["study", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b"], capsys)
    assert code == 0
    for name in ("error_curve.csv", "error_surface.csv", "estimate_N6_history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("mode", ["prohorov", "levy", "kolmogorov"])
def test_metric(tmp_path, capsys, mode):
    g = Grid(4, 1.0)
    save_measure(uniform(g, g), tmp_path / "u.json")
    save_measure(truth_measure("beta22")(g, g), tmp_path / "b.json")
    code, out, _ = run(["metric", tmp_path / "u.json", tmp_path / "b.json", "--mode", mode], capsys)
    assert code == 0
    d = float(out)
    assert 0 < d <= 1
    code, out, _ = run(["metric", tmp_path / "u.json", tmp_path / "u.json", "--mode", mode], capsys)
    assert float(out) == 0.0


def test_metric_output_format(tmp_path, capsys):
    g = Grid(3, 1.0)
    save_measure(uniform(g, g), tmp_path / "u.json")
    save_measure(truth_measure("arcsine")(g, g), tmp_path / "a.json")
    _, out, _ = run(["metric", tmp_path / "u.json", tmp_path / "a.json", "--mode", "kolmogorov"], capsys)
    assert out.strip() == "%.17g" % float(out)


@pytest.mark.parametrize("args", [
    ["bogus"],
    [],
    ["metric", "missing.json", "missing.json"],
    ["forward", "--n", "zero"],
    ["forward", "--truth", "gamma"],
    ["--seed", "-1", "generate-data"],
    ["metric", "a", "b", "--mode", "wasserstein"],
])
def test_invalid_input_exit_code(tmp_path, capsys, monkeypatch, args):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        raise SystemExit(main(args))
    assert info.value.code == 2


def test_bad_measure_reports_row(tmp_path, capsys):
    g = Grid(3, 1.0)
    save_measure(uniform(g, g), tmp_path / "u.json")
    bad = json.loads((tmp_path / "u.json").read_text())
    bad["weights"][2] = [0.5, 0.5, 0.5]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    code, _, err = run(["metric", tmp_path / "u.json", tmp_path / "bad.json"], capsys)
    assert code == 2 and "row 3" in err


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"c_a": 1e6, "c_f": 0.0, "n_steps": 5}))
    code, _, err = run(["--config", cfg, "forward", "--n", 8, "--out", tmp_path], capsys)
    assert code == 3 and "numerical failure" in err


def test_failed_study_leg_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"c_a": 1e6, "c_f": 0.0, "n_steps": 5, "n_values": [4]}))
    code, out, err = run(["--config", cfg, "study", "--out", tmp_path], capsys)
    assert code == 3 and "N=4 failed" in err
    assert "nan" in (tmp_path / "error_curve.csv").read_text()
