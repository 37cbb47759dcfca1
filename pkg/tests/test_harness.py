import json
import math
from pathlib import Path

import numpy as np
import pytest

from eventadmm.harness import (ExperimentSpec, SpecError, SweepResult, best_savings, default_spec,
                               gen_general_instance, gen_noniid_regression, gen_nonconvex_toy,
                               local_minimizers, run_tradeoff_sweep)
from eventadmm.harness.cli import cli_main
from eventadmm.harness.studies import fit_slope

DATA = Path(__file__).parent / "data"


#%% specifications

def test_defaults_reproduce_lasso_study():
    s = ExperimentSpec()
    assert (s.N, s.n, s.horizon, s.rho, s.lam) == (50, 20, 50, 1.0, 0.1)
    assert s.T == math.inf


def test_unknown_key_is_named():
    with pytest.raises(SpecError, match="unknown key 'colour'"):
        ExperimentSpec.from_dict({"kind": "graph", "colour": 1})


@pytest.mark.parametrize("raw, key", [
    ({"kind": "magic"}, "kind"),
    ({"N": 1}, "N"),
    ({"N": 2.5}, "N"),
    ({"alpha": 2.0}, "alpha"),
    ({"p_drop": 1.5}, "p_drop"),
    ({"T": 0}, "T"),
    ({"T": "soon"}, "T"),
    ({"deltas": [-1.0]}, "deltas"),
    ({"seeds": []}, "seeds"),
])
def test_invalid_values_name_their_key(raw, key):
    with pytest.raises(SpecError, match=key):
        ExperimentSpec.from_dict(raw)


def test_json_round_trip(tmp_path):
    spec = ExperimentSpec.from_dict({"kind": "drop-study", "T": "inf", "resets": [1, 5, "inf"], "seeds": [3]})
    assert spec.p_drop == 0.3 and spec.resets == (1, 5, math.inf)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert ExperimentSpec.load(path) == spec


def test_kind_defaults_apply_under_overrides():
    spec = ExperimentSpec.from_dict({"kind": "graph", "horizon": 10})
    assert (spec.N, spec.horizon, spec.lam) == (10, 10, 0.0)
    assert default_spec("consensus-regression").alpha == 1.5


def test_invalid_json_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(SpecError, match="not valid JSON"):
        ExperimentSpec.load(tmp_path / "bad.json")


#%% data

def test_regression_shards_are_standardized_and_deterministic():
    a = gen_noniid_regression(9, 10, 5, seed=3)
    b = gen_noniid_regression(9, 10, 5, seed=3)
    assert len(a) == 9
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.A, fb.A) and np.array_equal(fa.b, fb.b)
        assert np.allclose(fa.A.mean(axis=0), 0) and np.allclose(np.linalg.norm(fa.A, axis=0), 1)
        assert np.isclose(np.linalg.norm(fa.b), 1) and np.isclose(fa.b.mean(), 0)
    assert not np.array_equal(a[0].A, gen_noniid_regression(9, 10, 5, seed=4)[0].A)


def test_shards_are_heterogeneous():
    locs = gen_noniid_regression(9, 20, 3, seed=0)
    mins = local_minimizers(locs)
    spread = np.linalg.norm(mins - mins.mean(axis=0), axis=1).mean()
    assert spread > 0.1 * np.linalg.norm(mins.mean(axis=0))


@pytest.mark.parametrize("kappa", [10.0, 300.0, 1e4])
def test_general_instance_has_requested_condition_number(kappa):
    prob = gen_general_instance(5, kappa, seed=1)
    H = prob.f.H
    eig = np.linalg.eigvalsh(H)
    sv = np.linalg.svd(prob.A, compute_uv=False)
    assert math.isclose(eig[-1] * sv[0] ** 2 / (eig[0] * sv[-1] ** 2), kappa, rel_tol=1e-8)
    assert math.isclose(prob.kappa, kappa, rel_tol=1e-8)


def test_general_instance_rejects_tiny_kappa():
    with pytest.raises(ValueError):
        gen_general_instance(4, 2.0, seed=0)


def test_nonconvex_toy_is_nonconvex_but_prox_friendly():
    fs = gen_nonconvex_toy(3, 4, seed=0)
    assert all(f.m == 0.0 and f.L == 3.0 for f in fs)


#%% studies

def test_golden_sweep_csv(tmp_path):
    spec = ExperimentSpec.load(DATA / "golden_sweep.json")
    run_tradeoff_sweep(spec).to_csv(tmp_path / "sweep.csv")
    assert (tmp_path / "sweep.csv").read_text() == (DATA / "golden_sweep.csv").read_text()


def test_parallel_sweep_matches_serial():
    spec = ExperimentSpec.load(DATA / "golden_sweep.json")
    assert run_tradeoff_sweep(spec.replace(workers=2)).rows == run_tradeoff_sweep(spec).rows


def test_best_savings_respects_gap_budget():
    base = (0.0, 0.0, 0, 1e-6, 0.001, 0.0, 1.0, 50, 50, 0, 0)
    cheap_bad = (0.1, 0.0, 0, 1e-2, 0.5, 0.0, 0.1, 5, 5, 0, 0)
    cheap_ok = (0.01, 0.0, 0, 2e-6, 0.005, 0.0, 0.4, 20, 20, 0, 0)
    saving, delta = best_savings(SweepResult([base, cheap_bad, cheap_ok]), 0, 0.01)
    assert saving == pytest.approx(0.6) and delta == 0.01
    with pytest.raises(ValueError):
        best_savings(SweepResult([cheap_ok]), 0)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_fit_slope_recovers_power(t):
    k = np.arange(1, 200)
    assert fit_slope(k, 3.0 * k**-t) == pytest.approx(-t)


#%% command line

def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_cli_certify(capsys):
    assert cli_main(["certify", "--kappa", "1e4", "--alpha", "1", "--eps", "0"]) == 0
    rep = _json_out(capsys)
    assert rep["feasible"] is True and len(rep["minors"]) == 4


def test_cli_certify_adds_drift_to_threshold(capsys):
    assert cli_main(["certify", "--kappa", "1e3", "--delta", "0.1", "--T", "10", "--chi-bar", "0.05"]) == 0
    rep = _json_out(capsys)
    assert rep["delta"] == pytest.approx(0.6)


@pytest.mark.parametrize("argv", [["certify", "--kappa", "1"], ["nonsense"], ["certify"]])
def test_cli_bad_arguments_exit_2(argv, capsys):
    assert cli_main(argv) == 2


def test_cli_unknown_spec_key_exit_2(tmp_path, capsys):
    (tmp_path / "s.json").write_text('{"kind": "tradeoff-sweep", "bogus": 1}')
    assert cli_main(["sweep", "--spec", str(tmp_path / "s.json")]) == 2
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_cli_kind_mismatch_exit_2(tmp_path, capsys):
    (tmp_path / "s.json").write_text('{"kind": "graph"}')
    assert cli_main(["sweep", "--spec", str(tmp_path / "s.json")]) == 2


def test_cli_sweep_writes_golden_csv(tmp_path, capsys):
    assert cli_main(["sweep", "--spec", str(DATA / "golden_sweep.json"), "--out-dir", str(tmp_path)]) == 0
    out = _json_out(capsys)
    assert out["rows"] == 4 and out["failed"] == 0
    assert (tmp_path / "sweep.csv").read_text() == (DATA / "golden_sweep.csv").read_text()


def test_cli_run_failure_exit_1(monkeypatch, capsys):
    from eventadmm.consensus import RunFailure
    from eventadmm.harness import cli

    def boom(spec):
        raise RunFailure("non-finite consensus variable at iteration 3")

    monkeypatch.setitem(cli.STUDY, "tradeoff-sweep", boom)
    assert cli_main(["sweep"]) == 1
    assert "iteration 3" in capsys.readouterr().err


def test_cli_general_run(tmp_path, capsys):
    spec = {"kind": "general", "p": 3, "kappa": 50, "horizon": 30, "deltas": [1e-3], "p_drop": 0.5,
            "drop_channels": ["rs", "ru"], "T": 3}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert cli_main(["run", "--spec", str(tmp_path / "s.json"), "--out-dir", str(tmp_path)]) == 0
    assert _json_out(capsys)["kappa"] == pytest.approx(50)
    assert (tmp_path / "general_seed0.csv").exists()


@pytest.mark.parametrize("kind, extra, csv", [
    ("consensus-lasso", {"N": 5, "n": 3, "horizon": 10}, "consensus-lasso_seed0.csv"),
    ("consensus-regression", {"N": 5, "n": 3, "horizon": 10}, "consensus-regression_seed0.csv"),
    ("sharing", {"N": 4, "n": 3, "horizon": 10}, "sharing_seed0.csv"),
    ("graph", {"N": 6, "n": 3, "n_edges": 8, "horizon": 20}, "graph_seed0.csv"),
])
def test_cli_run_kinds(tmp_path, capsys, kind, extra, csv):
    (tmp_path / "s.json").write_text(json.dumps({"kind": kind, **extra}))
    assert cli_main(["run", "--spec", str(tmp_path / "s.json"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / csv).exists()
    _json_out(capsys)


def test_cli_studies(tmp_path, capsys):
    specs = {
        "drop-study": {"kind": "drop-study", "N": 5, "n": 3, "horizon": 20, "resets": [1, "inf"]},
        "decay-study": {"kind": "decay-study", "p": 3, "horizon": 200},
        "nonconvex-study": {"kind": "nonconvex-study", "N": 3, "n": 2, "horizon": 300},
        "graph-run": {"kind": "graph", "N": 5, "n": 3, "n_edges": 6, "horizon": 50, "deltas": [0.05],
                      "random_p": [0.5]},
    }
    for cmd, spec in specs.items():
        (tmp_path / f"{cmd}.json").write_text(json.dumps(spec))
        assert cli_main([cmd, "--spec", str(tmp_path / f"{cmd}.json"), "--out-dir", str(tmp_path)]) == 0, cmd
        assert _json_out(capsys)
    assert (tmp_path / "drop_Tinf_seed0.csv").exists()
    assert (tmp_path / "graph_study.csv").exists()


@pytest.mark.parametrize("fmt", ["csv", "npz"])
def test_cli_gen_data(tmp_path, capsys, fmt):
    (tmp_path / "s.json").write_text('{"kind": "consensus-lasso", "N": 3, "n": 2, "rows_per_agent": 4}')
    argv = ["gen-data", "--spec", str(tmp_path / "s.json"), "--out-dir", str(tmp_path)]
    if fmt == "npz":
        argv += ["--format", "npz"]
    assert cli_main(argv) == 0
    path = Path(_json_out(capsys)["files"][0])
    if fmt == "csv":
        lines = path.read_text().splitlines()
        assert lines[0] == "agent,target,x0,x1" and len(lines) == 13
    else:
        with np.load(path) as z:
            assert z["A0"].shape == (4, 2)
