import json

import numpy as np
import pytest

from tensorimpute.cli import main
from tensorimpute.io import read_tensor


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "simulate", "--study", 2, "--dims", "4,5,3", "--seed", 7, "--output", tmp_path / name)
        assert code == 0
    for f in ("truth.csv", "data.csv", "data.json", "covariance.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    t = read_tensor(tmp_path / "a" / "data.csv")
    assert t.dims == (4, 5, 3)


def test_simulate_fiber_descriptor(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--study", 1, "--dims", "4,4,3", "--missing", "fiber",
                       "--fiber-mode", 2, "--output", tmp_path)
    assert code == 0
    meta = json.loads((tmp_path / "data.json").read_text())
    assert meta["fiber_missing_mode"] == 2
    t = read_tensor(tmp_path / "data.csv")
    assert np.all(t.mask.all(axis=1) | ~t.mask.any(axis=1))
    assert json.loads(out)["n_missing"] == t.n_missing


def test_simulate_replicates(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--study", 1, "--dims", "4,4,3", "--rank", 2, "--replicates", 2,
                       "--engines", "independent,em", "--iterations", 20, "--burn-in", 10,
                       "--output", tmp_path)
    assert code == 0, err
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 5
    summary = json.loads((tmp_path / "metrics_summary.json").read_text())
    assert set(summary["engines"]) == {"independent", "em"}


@pytest.fixture
def sim_dir(tmp_path, capsys):
    run(capsys, "simulate", "--study", 1, "--dims", "5,4,3", "--rank", 2, "--seed", 1, "--output", tmp_path / "sim")
    return tmp_path


@pytest.mark.parametrize("engine", ["independent", "correlated", "em"])
def test_impute_outputs(sim_dir, capsys, engine):
    cfg = sim_dir / "cfg.yaml"
    cfg.write_text(f"engine: {engine}\nrank: 2\nmcmc:\n  iterations: 20\n  burn_in: 10\n  seed: 3\n")
    out = sim_dir / engine
    code, stdout, err = run(capsys, "impute", "--input", sim_dir / "sim" / "data.csv", "--config", cfg,
                            "--output", out)
    assert code == 0, err
    t = read_tensor(sim_dir / "sim" / "data.csv")
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + t.n_missing
    n_draws = 1 if engine == "em" else 20
    assert len((out / "draws.csv").read_text().splitlines()) == 1 + n_draws * t.n_missing
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rank"] == 2 and manifest["config"]["engine"] == engine
    json.loads((out / "convergence.json").read_text())


def test_cv_rank(sim_dir, capsys):
    cfg = sim_dir / "cv.json"
    cfg.write_text(json.dumps({"engine": "em", "rank": [1, 2], "cv": {"k": 3}}))
    code, stdout, err = run(capsys, "cv-rank", "--input", sim_dir / "sim" / "data.csv", "--config", cfg,
                            "--output", sim_dir / "cv")
    assert code == 0, err
    assert json.loads(stdout)["selected_rank"] in (1, 2)
    assert len((sim_dir / "cv" / "cv_scores.csv").read_text().splitlines()) == 1 + 2 * 3


def test_diversity_and_diagnostics(sim_dir, capsys):
    data = sim_dir / "sim" / "data.csv"
    cfg = sim_dir / "c.json"
    cfg.write_text(json.dumps({"rank": 2, "mcmc": {"iterations": 20, "burn_in": 10}}))
    assert run(capsys, "impute", "--input", data, "--config", cfg, "--output", sim_dir / "imp")[0] == 0
    for method in ("point", "mi"):
        code, _, err = run(capsys, "diversity", "--input", data, "--draws", sim_dir / "imp" / "draws.csv",
                           "--method", method, "--time-mode", 2, "--taxa-mode", 3,
                           "--output", sim_dir / f"{method}.csv")
        assert code == 0, err
        assert len((sim_dir / f"{method}.csv").read_text().splitlines()) == 1 + 4
    code, _, err = run(capsys, "diagnostics", "--input", data, "--time-mode", 2, "--taxa-mode", 3,
                       "--output", sim_dir / "diag")
    assert code == 0, err
    assert (sim_dir / "diag" / "histogram.csv").exists()


@pytest.mark.parametrize("text", [
    '{"engine": "magic"}',
    '{"rank": 0}',
    '{"mcmc": {"iterations": 10, "bogus": 1}}',
    '{"mcmc": {"iterations": 10, "burn_in": 20}}',
])
def test_bad_config_reports_json(sim_dir, capsys, text):
    cfg = sim_dir / "bad.json"
    cfg.write_text(text)
    code, out, err = run(capsys, "impute", "--input", sim_dir / "sim" / "data.csv", "--config", cfg,
                         "--output", sim_dir / "o")
    assert code != 0 and out == ""
    msg = json.loads(err)
    assert set(msg) == {"error", "message"}


def test_bad_arguments_report_json(capsys):
    code, _, err = run(capsys, "simulate")
    assert code == 1 and json.loads(err)["error"] == "CliError"
    code, _, err = run(capsys, "impute", "--input", "/nonexistent/x.csv")
    assert code == 1 and "message" in json.loads(err)
