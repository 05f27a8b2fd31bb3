import csv
import json

import numpy as np
import pytest

from tsdispatch.cli import SCHEMA_VERSION, load_config, main, ConfigError
from tsdispatch.feeder import build_sensitivity
from tsdispatch.saa import default_p0a_box, solve_saa
from tsdispatch.scenario import rng_stream, sample_batch, spec_for


def run(*argv):
    return main([str(a) for a in argv])


def test_short_run_warns_at_max_iters(tmp_path):
    out = tmp_path / "o"
    assert run("run", "--output-dir", out, "--max-iters", 10) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_iters_warning"] is True and summary["converged"] is False
    assert summary["schema_version"] == SCHEMA_VERSION
    assert summary["counters"]["iterations"] == 10
    assert len(summary["nu"]) == 30 and summary["cost_estimate"] > 0
    rows = list(csv.reader(open(out / "trace.csv")))
    assert len(rows) == 11


def test_missing_alpha(tmp_path, capsys):
    assert run("run", "--algorithm", "pda", "--output-dir", tmp_path) == 1
    assert "alpha required" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"algorithm": "deterministic", "output_dir": str(tmp_path / "d")}))
    assert run("run", "--config", cfg) == 0
    assert (tmp_path / "d" / "summary.json").exists()
    loaded = load_config(str(cfg), ["stop.max_iters=7", "scenario.load_scale=1.5"])
    assert loaded["stop"]["max_iters"] == 7 and loaded["scenario"]["load_scale"] == 1.5
    assert loaded["algorithm"] == "deterministic"


@pytest.mark.parametrize("doc, needle", [
    ({"algoritm": "ada"}, "algoritm"),
    ({"stop": {"max_iter": 5}}, "stop.max_iter"),
    ({"algorithm": "sgd"}, "algorithm"),
    ({"algorithm": "approx_prob", "alpha": 1.5}, "alpha"),
    ({"feeder_path": "/nonexistent.json"}, "feeder_path"),
    ({"voltage_tight": [1.1, 1.0]}, "voltage_tight"),
])
def test_config_errors_name_the_field(tmp_path, capsys, doc, needle):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert run("run", "--config", cfg, "--output-dir", tmp_path) == 1
    assert needle in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "none.json"))


def test_runs_are_reproducible(tmp_path):
    out = tmp_path / "o"
    args = ("run", "--algorithm", "pda", "--alpha", 0.05, "--max-iters", 25, "--seed", 4, "--output-dir", out)
    run(*args)
    first = [(out / f).read_bytes() for f in ("trace.csv", "summary.json")]
    run(*args)
    assert first == [(out / f).read_bytes() for f in ("trace.csv", "summary.json")]


def test_evaluate(tmp_path):
    out = tmp_path / "o"
    run("run", "--output-dir", out, "--max-iters", 5)
    summary = out / "summary.json"
    assert run("evaluate", summary, "--n-samples", 30, "--output-dir", tmp_path / "e1") == 0
    assert run("evaluate", summary, "--n-samples", 30, "--output-dir", tmp_path / "e2") == 0
    for name in ("eval.json", "perbus_violations.csv", "hist_bus1.csv", "hist_bus15.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    assert run("evaluate", summary, "--n-samples", 0) == 1


def test_evaluate_refuses_bad_summaries(tmp_path, capsys):
    bad = tmp_path / "s.json"
    bad.write_text("{broken")
    assert run("evaluate", bad) == 1
    bad.write_text(json.dumps({"schema_version": SCHEMA_VERSION + 1}))
    assert run("evaluate", bad) == 1
    assert "schema_version" in capsys.readouterr().err
    assert run("evaluate", tmp_path / "missing.json") == 1


def test_oracle(tmp_path, feeder15):
    assert run("oracle", "-K", -1, "--output-dir", tmp_path) == 1
    assert run("oracle", "-K", 1, "--output-dir", tmp_path, "--seed", 2) == 0
    doc = json.loads((tmp_path / "oracle.json").read_text())
    spec = spec_for(feeder15, seed=2)
    xi = sample_batch(spec, 1, rng_stream(2, 3))
    ref = solve_saa(feeder15, build_sensitivity(feeder15), xi, default_p0a_box(xi[0].p_load))
    assert doc["K"] == 1
    assert doc["cost"] == pytest.approx(ref.cost, rel=1e-9)


def test_scenario_dump(tmp_path):
    target = tmp_path / "s.csv"
    assert run("scenario-dump", "-n", 4, "--out", target) == 0
    rows = list(csv.reader(open(target)))
    assert len(rows) == 5 and len(rows[0]) == 15 + 15 + 2
    assert run("scenario-dump", "-n", 0, "--out", target) == 1


def test_empirical_training_set(tmp_path):
    out = tmp_path / "o"
    assert run("run", "--output-dir", out, "--set", "empirical_k=3", "--max-iters", 5) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["empirical_k"] == 3


def test_pi_override(tmp_path):
    from tsdispatch.cli import build_model
    cfg = load_config(None, ["pi=12.5"])
    m = build_model(cfg)
    assert m.prices.pv_compensation == (12.5, 12.5)
    cfg = load_config(None, ["voltage_tight=[0.9801, 1.0201]"])
    assert build_model(cfg).regions.a_min == 0.9801
    np.testing.assert_array_equal(build_model(load_config(None)).p_load, m.p_load)
