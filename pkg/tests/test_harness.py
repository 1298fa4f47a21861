import json
import math
import time

import numpy as np
import pytest

from yukawa_exchange import cli
from yukawa_exchange.geometry import unit_square
from yukawa_exchange.harness import (ConfigError, ExperimentConfig, RateReport, compare_snapshot, emit_report,
                                     fit_slope, load_config, read_csv_report, report_dict, run_experiment)

SQ = unit_square().to_dict()
SWEEP = [0.2, 0.15, 0.1, 0.075]
SMOKE_MESH = {"n": 64, "cutoff_gamma": 2.0}
SMALL_SECTOR = {"sector": {"nr": 60, "nt": 12}}


def test_fit_slope_trivial_cases():
    g = [0.2, 0.1, 0.05, 0.025, 0.0125]
    s, r = fit_slope(g, g)
    assert s == pytest.approx(1.0, abs=1e-12) and r == pytest.approx(0.0, abs=1e-12)
    assert fit_slope(g, np.sqrt(g))[0] == pytest.approx(0.5, abs=1e-12)
    assert fit_slope(g, [3.0] * 5)[0] == pytest.approx(0.0, abs=1e-12)
    # dropping the largest gamma removes a pre-asymptotic outlier
    v = list(g)
    v[0] = 5.0
    assert fit_slope(g, v, drop=1)[0] == pytest.approx(1.0, abs=1e-12)
    assert fit_slope(g, v, drop=0)[1] > 0.1


def test_fit_slope_errors():
    with pytest.raises(ValueError):
        fit_slope([0.2, 0.1, 0.05], [1.0, 0.0, 1.0], drop=0)
    with pytest.raises(ValueError):
        fit_slope([0.2, 0.1, 0.05], [1.0, 1.0, 1.0], drop=1)


@pytest.mark.parametrize("bad", [
    {"experiment": "nonsense", "sweep": SWEEP},
    {"experiment": "exchange_rate", "sweep": [0.1, 0.2, 0.05, 0.01]},
    {"experiment": "exchange_rate", "sweep": [0.2, 0.1, 0.05]},
    {"experiment": "exchange_rate", "sweep": SWEEP, "s": 0.9},
    {"experiment": "exchange_rate", "sweep": SWEEP, "colour": "red"},
    {"sweep": SWEEP},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_hash_tracks_content(tmp_path):
    a = ExperimentConfig.from_dict({"experiment": "dtn_rate", "sweep": SWEEP})
    b = ExperimentConfig.from_dict({"experiment": "dtn_rate", "sweep": list(SWEEP)})
    c = ExperimentConfig.from_dict({"experiment": "dtn_rate", "sweep": SWEEP, "seed": 1})
    assert a.digest() == b.digest() != c.digest()
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(a.to_dict()))
    assert load_config(p).digest() == a.digest()
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def make_report():
    return RateReport("exchange_rate", [0.2, 0.1, 0.05, 0.025], [0.1 / 3, 0.05 / 3, 0.025 / 3, 0.0125 / 7],
                      0.9, 0.01, 1, {"C": 1 / 3}, {"extra": [1.0, 2.0, math.pi, math.e]}, {"slope": True})


def test_emit_round_trip(tmp_path):
    rep = make_report()
    cfg = ExperimentConfig.from_dict({"experiment": "exchange_rate", "sweep": rep.gammas})
    js = emit_report(rep, tmp_path, "json", cfg)
    d = json.loads(open(js).read())
    assert d["config_hash"] == cfg.digest() and d["version"] and d["schema"] == 1
    assert d["report"]["defects"] == rep.defects and d["report"]["passed"] is True
    cs = emit_report(rep, tmp_path, "csv")
    back = read_csv_report(cs)
    assert back["gamma"] == rep.gammas and back["defect"] == rep.defects
    assert back["extra"] == rep.series["extra"]
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path, "xml")


def test_snapshot_comparison(tmp_path):
    rep = make_report()
    path = emit_report(rep, tmp_path, "json")
    assert compare_snapshot(rep, path) == []
    rep.defects[2] *= 1 + 1e-7
    assert compare_snapshot(rep, path) == [("defects", 2)]
    rep.defects[2] = json.load(open(path))["report"]["defects"][2] * (1 + 1e-9)
    assert compare_snapshot(rep, path) == []


def test_determinism():
    d = {"experiment": "dtn_rate", "sweep": [0.2, 0.1, 0.05, 0.04], "seed": 5, "mesh": {"n": 64}}
    a = json.dumps(report_dict(run_experiment(d), ExperimentConfig.from_dict(d)), sort_keys=True)
    b = json.dumps(report_dict(run_experiment(d), ExperimentConfig.from_dict(d)), sort_keys=True)
    assert a == b


@pytest.mark.parametrize("cfg", [
    {"experiment": "exchange_rate"},
    {"experiment": "exchange_rate", "geometry": SQ},
    {"experiment": "dtn_rate"},
    {"experiment": "dtn_rate", "geometry": SQ, "params": SMALL_SECTOR},
    {"experiment": "scattering_rate"},
    {"experiment": "counterexample", "geometry": SQ},
    {"experiment": "spectrum", "geometry": SQ, "sweep": [0.2, 0.15, 0.1], "params": SMALL_SECTOR},
    {"experiment": "spectrum", "sweep": [0.2, 0.15, 0.1]},
    {"experiment": "solve", "sweep": [0.1], "geometry": {"builtin": "disc", "n": 64}},
], ids=lambda c: c["experiment"] + ("-square" if c.get("geometry") == SQ else ""))
def test_smoke_runs(cfg):
    cfg = dict(cfg)
    cfg.setdefault("sweep", SWEEP)
    cfg["mesh"] = SMOKE_MESH
    t = time.perf_counter()
    rep = run_experiment(cfg)
    assert time.perf_counter() - t < 5.0
    assert all(np.isfinite(rep.defects)) and rep.checks
    assert rep.metadata["config_hash"] == ExperimentConfig.from_dict(cfg).digest()


def test_smooth_slopes_on_default_meshes():
    rep = run_experiment({"experiment": "exchange_rate", "sweep": [0.2, 0.1, 0.05, 0.025]})
    assert rep.passed and 0.85 <= rep.fitted_slope <= 1.15
    rep = run_experiment({"experiment": "scattering_rate", "sweep": [0.2, 0.1, 0.05, 0.025, 0.0125]})
    assert rep.passed and rep.fitted_slope >= 0.4


def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["solve", "--out", str(out), "--format", "csv"]) == 0
    assert (out / "solve.csv").exists() and (out / "history.csv").exists()
    assert "PASS solve" in capsys.readouterr().out

    cfg = {"experiment": "solve", "sweep": [0.1], "geometry": {"builtin": "disc", "n": 64},
           "params": {"error_tol": 1e-30}}
    p = tmp_path / "fail.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["solve", "--config", str(p), "--out", str(out)]) == 1
    assert json.load(open(out / "solve.json"))["report"]["passed"] is False

    assert cli.main(["rates-dtn", "--config", str(p), "--out", str(out)]) == 2
    p.write_text(json.dumps({"experiment": "solve", "sweep": [0.1], "bogus": 1}))
    assert cli.main(["solve", "--config", str(p), "--out", str(out)]) == 2

    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["mesh", "--out", str(blocker / "sub"), "--n", "64"]) == 3


def test_cli_mesh(tmp_path, capsys):
    assert cli.main(["mesh", "--out", str(tmp_path), "--n", "64", "--gamma", "0.1"]) == 0
    data = np.loadtxt(tmp_path / "mesh.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 6 and data[:, 4].sum() == pytest.approx(4.0, abs=1e-12)
    assert "digest" in capsys.readouterr().out
