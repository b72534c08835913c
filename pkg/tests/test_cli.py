import csv
import json

import pytest

from hawkes_exec.cli import main

TINY_SOLVE = {"grid": {"n_t": 4, "x_max": 2.0, "n_x": 4, "dev_min": -1.0, "dev_max": 1.0, "n_dev": 4,
                       "kappa_max": 6.0, "n_kappa": 3, "n_mu": 3}}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"solve": TINY_SOLVE, "x0": 1.5}))
    return str(path)


def test_simulate_writes_named_file(tmp_path):
    assert main(["simulate", "--paths", "1", "--seed", "42", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "path_000042.csv")
    assert rows[0] == ["time", "side", "volume", "regime", "S", "D", "P"]


def test_global_flags_before_the_command(tmp_path):
    assert main(["--seed", "7", "--out", str(tmp_path), "simulate"]) == 0
    assert (tmp_path / "path_000007.csv").exists()


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--paths", "2", "--seed", "3", "--out", str(a)]) == 0
    assert main(["simulate", "--paths", "2", "--seed", "3", "--out", str(b)]) == 0
    for name in ("path_000003.csv", "path_000004.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_invalid_inputs_exit_with_validation_code(tmp_path):
    out = tmp_path / "never"
    assert main(["simulate", "--paths", "0", "--out", str(out)]) == 2
    assert not out.exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"rho": -1.0}}))
    assert main(["simulate", "--config", str(bad), "--out", str(out)]) == 2
    bad.write_text(json.dumps({"surprise": 1}))
    assert main(["validate", "--config", str(bad), "--out", str(out)]) == 2
    assert main(["regions", "--field", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert main(["filter", "--path", str(tmp_path / "missing.csv"), "--out", str(out)]) == 2
    assert not out.exists()


def test_filter_on_empty_path_is_pure_flow(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("time,side,volume,regime,S,D,P\n")
    assert main(["filter", "--path", str(empty), "--prior", "0.5,0.5", "--grid", "11", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "filter_empty.csv")
    assert rows[0] == ["time", "pi_1", "pi_2", "lambda_1_plus", "lambda_2_plus", "lambda_1_minus",
                       "lambda_2_minus", "map_estimate", "true_regime"]
    assert len(rows) == 12
    # symmetric start: the flow keeps the posterior at one half
    assert all(abs(float(r[1]) - 0.5) < 1e-9 for r in rows[1:])


def test_filter_reports_malformed_line(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,side,volume,regime,S,D,P\n0.1,buy,1,1,0,0,0\n0.2,hold,1,1,0,0,0\n")
    assert main(["filter", "--path", str(bad), "--prior", "0.5,0.5", "--out", str(tmp_path)]) == 2


def test_filter_map_accuracy_beats_coin_flip(tmp_path):
    assert main(["filter", "--simulate", "200", "--prior", "0.5,0.5", "--grid", "21", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "filter_summary.json").read_text())
    assert summary["n_paths"] == 200
    assert summary["map_accuracy"] > 0.5


def test_solve_regions_backtest_pipeline(tmp_path, config):
    out = str(tmp_path)
    assert main(["solve", "--config", config, "--n-max", "0", "--out", out]) == 0
    field = str(tmp_path / "field.json")
    assert main(["regions", "--config", config, "--field", field, "--x", "1.0", "--out", out]) == 0
    files = sorted(p.name for p in tmp_path.glob("region_*.csv"))
    assert len(files) == 6
    for name in files:
        rows = read_csv(tmp_path / name)
        assert rows[0] == ["a", "b", "trade", "xi_star", "g_value"]
    assert main(["backtest", "--config", config, "--field", field, "--paths", "3", "--seed", "5", "--out", out]) == 0
    rows = read_csv(tmp_path / "backtest.csv")
    assert rows[0] == ["seed", "revenue_opt", "revenue_immediate", "revenue_tranches"]
    assert [r[0] for r in rows[1:]] == ["5", "6", "7"]


def test_validate_reports_flags(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert set(report) >= {"A1", "A2", "A3", "A4", "branching_radius", "stable"}
