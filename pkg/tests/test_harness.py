import json
import math

import numpy as np
import pytest
import yaml

from cblab.cli import main
from cblab.harness import (CONVERGENCE_COLUMNS, ConfigError, ExperimentConfig, InsufficientData,
                           Report, emit_report, fit_rate, load_config, load_report,
                           perturb_problem, report_to_csv, report_to_json, run_experiment)
from cblab.continuum import ManufacturedDeformation, TrigPerturbation
from cblab.lattice import Box, InteractionStencil
from cblab.potentials import LennardJones, PairSum
from cblab.solver import HypothesisViolation, manufactured_problem

LJ1_CFG = {
    "experiment": "converge",
    "domain": {"shape": "box", "lower": [0.0], "upper": [1.0]},
    "manufactured": {"A0": [[1.0]], "amplitude": 0.01},
    "epsilon_list": [0.125, 0.0625, 0.03125],
    "ift": {"n_samples": 200},
}

TRI_CFG = {
    "experiment": "stability",
    "potential": {"kind": "triangular", "pair": {"kind": "lennard_jones"}},
    "manufactured": {"A0": [[1.0, 0.5], [0.0, 0.8660254037844386]]},
}


def cfg(**kw):
    data = json.loads(json.dumps(LJ1_CFG))
    data.update(kw)
    return ExperimentConfig.from_dict(data)


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"experiment": "nope"},
    {"epsilon_list": [0.1, 0.2]},
    {"epsilon_list": [1.5, 0.5]},
    {"epsilon_list": []},
    {"gamma": 0.3},
    {"solver": {"method": "bfgs"}},
    {"output": {"format": "xml"}},
])
def test_config_validation(bad):
    data = dict(LJ1_CFG, **bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_config_files_and_overrides(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text(yaml.safe_dump(LJ1_CFG))
    j = tmp_path / "c.json"
    j.write_text(json.dumps(LJ1_CFG))
    a, b = load_config(y), load_config(j, seed=7)
    assert a.epsilon_list == b.epsilon_list == LJ1_CFG["epsilon_list"]
    assert a.seed == 0 and b.seed == 7
    # nested sections merge key by key
    assert a.solver["method"] == "newton" and a.ift["n_samples"] == 200 and a.ift["r1"] == 0.01


# ---------------------------------------------------------------- rate fit


def test_fit_rate_exact_power_laws():
    eps = 0.5 ** np.arange(3, 8)
    assert fit_rate(eps, 3.0 * eps ** 2)["slope"] == pytest.approx(2.0, abs=1e-12)
    assert fit_rate(eps, 0.2 * eps ** 1.5)["slope"] == pytest.approx(1.5, abs=1e-12)
    rows = [{"eps": e, "error": e ** 2} for e in eps]
    assert fit_rate(rows)["r2"] == pytest.approx(1.0)


def test_fit_rate_noisy_data():
    rng = np.random.default_rng(0)
    eps = 0.5 ** np.arange(3, 8)
    for _ in range(20):
        err = eps ** 2 * (1 + rng.uniform(-0.05, 0.05, eps.size))
        assert 1.85 <= fit_rate(eps, err)["slope"] <= 2.15


def test_fit_rate_exclusions():
    eps = [0.5, 0.25, 0.125, 0.0625]
    fit = fit_rate(eps, [0.25, 0.0625, 0.0, 0.00390625])
    assert fit["excluded"] == [0.125] and fit["n_used"] == 3 and "excluded" in fit["note"]
    assert fit["slope"] == pytest.approx(2.0)
    with pytest.raises(InsufficientData):
        fit_rate(eps, [0.0, -1.0, None, 0.1])
    with pytest.raises(InsufficientData):
        fit_rate(eps, [0.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------- reports


def test_empty_report_csv_is_header_only():
    rep = Report("converge", CONVERGENCE_COLUMNS)
    assert report_to_csv(rep) == ",".join(CONVERGENCE_COLUMNS) + "\n"


def test_csv_cells():
    rep = Report("x", ["a", "b", "c", "d"], [{"a": 0.1, "b": None, "c": [1, 2], "d": float("nan")}])
    lines = report_to_csv(rep).splitlines()
    assert lines == ["a,b,c,d", '0.1,,"[1, 2]",']


def test_json_roundtrip(tmp_path):
    rep = run_experiment(cfg(epsilon_list=[0.125, 0.0625, 0.03125]))
    path = tmp_path / "r.json"
    text = emit_report(rep, "json", path)
    assert path.read_text() == text
    back = load_report(path)
    assert back == rep and type(back) is type(rep)
    assert back.fitted_rate == rep.fitted_rate
    assert json.loads(text)["schema_version"] == 1


def test_reruns_byte_identical_and_thread_independent():
    a = report_to_json(run_experiment(cfg()))
    b = report_to_json(run_experiment(cfg()))
    c = run_experiment(ExperimentConfig.from_dict(LJ1_CFG, threads=3))
    assert a == b
    assert c.rows == json.loads(a)["rows"]


# ------------------------------------------------------------ experiments


def test_convergence_rows_and_rate():
    rep = run_experiment(ExperimentConfig.from_dict(dict(LJ1_CFG, domain={"shape": "box", "lower": [0.0], "upper": [4.0]},
                                                         epsilon_list=[0.125, 0.0625, 0.03125, 0.015625])))
    assert rep.columns == CONVERGENCE_COLUMNS
    assert all(r["status"] == "ok" for r in rep.rows)
    assert rep.fitted_rate >= 1.8


def test_zero_amplitude_is_exact():
    rep = run_experiment(cfg(manufactured={"A0": [[1.0]], "amplitude": 0.0}))
    assert rep.summary["fit_note"] == "exact" and rep.fitted_rate is None


def test_critical_gamma_with_maximal_perturbations():
    rep = run_experiment(ExperimentConfig.from_dict(dict(
        LJ1_CFG, gamma=0.5, perturbation={"force": "K2", "boundary": "K2"},
        manufactured={"A0": [[1.0]], "amplitude": 2e-6},
        domain={"shape": "box", "lower": [0.0], "upper": [4.0]},
        epsilon_list=[0.125, 0.0625, 0.03125, 0.015625])))
    # the data perturbation dominates, so the error tracks ε^γ
    assert 0.45 <= rep.fitted_rate <= 0.6
    assert all(r["hypothesis_ok"] for r in rep.rows) and rep.summary["all_within_K3"]


def test_hypothesis_failure_without_override():
    data = dict(LJ1_CFG, solver={"method": "fixed_point"},
                manufactured={"A0": [[1.0]], "amplitude": 0.02})
    with pytest.raises(HypothesisViolation):
        run_experiment(ExperimentConfig.from_dict(data))
    data["solver"] = {"method": "fixed_point", "override": True}
    rep = run_experiment(ExperimentConfig.from_dict(data))
    assert all(r["status"] == "ok" and r["hypothesis_ok"] is False for r in rep.rows)


def test_failed_rows_are_recorded_and_excluded():
    # the coarsest spacing leaves no interior point
    data = dict(LJ1_CFG, epsilon_list=[0.5, 0.125, 0.0625, 0.03125])
    rep = run_experiment(ExperimentConfig.from_dict(data))
    failed = [r for r in rep.rows if r["status"] == "failed"]
    assert [r["eps"] for r in failed] == [0.5]
    assert "no interior points" in failed[0]["error_cause"]
    assert rep.summary["n_ok"] == 3
    ok = [r for r in rep.rows if r["status"] == "ok"]
    fit = fit_rate([r["eps"] for r in ok], [r["error_h1_vs_Sy"] for r in ok])
    assert rep.fitted_rate == fit["slope"]


def test_residual_order_affine_skips_ratios():
    rep = run_experiment(cfg(experiment="residual_order", manufactured={"A0": [[1.02]], "amplitude": 0.0}))
    assert rep.summary["note"] == "exact" and rep.summary["ratios"] == []


def test_residual_order_ratios():
    rep = run_experiment(cfg(experiment="residual_order", epsilon_list=[0.125, 0.0625, 0.03125, 0.015625],
                             domain={"shape": "box", "lower": [0.0], "upper": [2.0]}))
    assert len(rep.summary["ratios"]) == 3 and rep.summary["all_in_window"]


def test_single_cell_phase_diagram():
    rep = run_experiment(ExperimentConfig.from_dict({
        "experiment": "phase_diagram",
        "phase_diagram": {"family": "triangular", "t": [1.0]}}))
    assert len(rep.rows) == 1 and rep.summary["boundaries"] == []
    assert rep.rows[0]["lambda_atom"] == pytest.approx(18.0, abs=1e-6)
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig.from_dict({"experiment": "phase_diagram",
                                                   "phase_diagram": {"family": "hexagonal"}}))


def test_perturbation_norms_are_exact():
    W = PairSum(InteractionStencil.nearest_neighbour(2), LennardJones())
    y = ManufacturedDeformation(np.eye(2), TrigPerturbation([1, 1]), 0.01)
    P = manufactured_problem(W, y, Box([0, 0], [1, 1]), 1 / 8)
    Q = perturb_problem(P, 3e-3, 2e-3, np.random.default_rng(0))
    dom = P.domain
    assert dom.hminus1_norm(Q.f_atom - P.f_tilde) == pytest.approx(3e-3, rel=1e-10)
    assert dom.boundary_seminorm(Q.g_atom - P.base[dom.boundary]) == pytest.approx(2e-3, rel=1e-10)
    assert Q.force_mismatch == pytest.approx(3e-3, rel=1e-10)


# --------------------------------------------------------------------- CLI


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_cli_stability_flags(tmp_path, capsys):
    conf = write(tmp_path, "tri.yaml", TRI_CFG)
    out = tmp_path / "s.json"
    code = main(["stability", "--config", conf, "--potential", "lennard_jones", "--deformation", "1.0",
                 "--grid", "32", "--refine", "2", "--report", str(out)])
    assert code == 0
    row = json.loads(out.read_text())["rows"][0]
    assert row["lambda_atom"] == pytest.approx(18.0, abs=1e-6)
    assert row["grid_resolution"] == 32 and row["refinement_passes"] == 2
    assert main(["stability", "--config", conf, "--deformation", "1.2", "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].startswith("lambda_atom,") and ",unstable," in text


def test_cli_phase_diagram_family(tmp_path, capsys):
    conf = write(tmp_path, "pd.yaml", {"experiment": "phase_diagram",
                                       "phase_diagram": {"t": [1.0, 1.2]}})
    assert main(["phase-diagram", "--config", conf, "--family", "triangular", "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split(",")[:4] == ["t", "lambda_atom", "lambda_LH_tilde", "classification"]
    assert len(lines) == 3


def test_cli_exit_codes(tmp_path, capsys):
    bad = dict(LJ1_CFG, solver={"method": "fixed_point"},
               manufactured={"A0": [[1.0]], "amplitude": 0.02})
    conf = write(tmp_path, "bad.yaml", bad)
    assert main(["converge", "--config", conf]) == 2
    assert "hypothesis" in capsys.readouterr().err
    assert main(["converge", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert main(["converge", "--no-such-flag"]) == 1
    good = write(tmp_path, "good.yaml", LJ1_CFG)
    out = tmp_path / "c.csv"
    assert main(["converge", "--config", good, "--out", str(out), "--format", "csv", "--seed", "3"]) == 0
    assert out.read_text().splitlines()[0] == ",".join(CONVERGENCE_COLUMNS)


def test_cli_solve_trace(tmp_path, capsys):
    conf = write(tmp_path, "s.yaml", dict(LJ1_CFG, experiment="solve_once"))
    assert main(["solve", "--config", conf, "--method", "newton"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["kind"] == "solve" and rep["summary"]["ift"]["M1"] == pytest.approx(2 / 36)
    assert rep["rows"][-1]["residual_hminus1"] <= 1e-10 * max(1.0, rep["rows"][0]["residual_hminus1"])
    assert math.isfinite(rep["summary"]["contraction_bound"])
