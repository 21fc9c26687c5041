import json
import math
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from utils.aft.estimator import EstimatorConfig
from utils.aft.simulation import (
    ESTIMATORS,
    Contamination,
    ContaminationTiming,
    ErrorLaw,
    SimulationScenario,
    _run_replicate,
    bias_mse_table,
    calibrate_tau,
    emit_tables,
    full_grid,
    generate_dataset,
    load_scenarios,
    quick_grid,
    run_scenario,
    scenario_seed,
    variance_table,
)
from utils.aft.stats_prims import RngStream

TINY = dict(n_clusters=12, replications=4, n_pilot=50_000, seed=99)


@pytest.fixture(scope="module")
def tiny_result():
    return run_scenario(SimulationScenario(**TINY))


def test_generated_structure():
    scenario = SimulationScenario(n_clusters=30)
    sim = generate_dataset(scenario, RngStream(1, 1).generator(), tau=math.inf)
    data = sim.dataset
    assert data.N == 30
    assert np.all((data.cluster_sizes >= 3) & (data.cluster_sizes <= 10))
    for i in range(data.N):
        x1 = data.covariates[data.cluster_index == i, 0]
        assert np.all(x1 == x1[0])
    # τ = ∞ 时无删失
    assert np.all(data.delta == 1)
    npt.assert_allclose(data.log_time, sim.log_failure_time)


def test_generation_reproducible():
    scenario = SimulationScenario(n_clusters=10)
    a = generate_dataset(scenario, RngStream(5, 2).generator(), tau=20.0)
    b = generate_dataset(scenario, RngStream(5, 2).generator(), tau=20.0)
    npt.assert_array_equal(a.dataset.log_time, b.dataset.log_time)
    npt.assert_array_equal(a.dataset.covariates, b.dataset.covariates)


def test_contamination_after_response():
    scenario = SimulationScenario(n_clusters=400, contamination=Contamination.FIVE_PCT_PLUS5)
    sim = generate_dataset(scenario, RngStream(2, 1).generator(), tau=math.inf)
    shift = sim.dataset.covariates[:, 1] - sim.clean_covariates[:, 1]
    assert set(np.unique(shift)) <= {0.0, 5.0}
    assert abs(np.mean(shift > 0) - 0.05) < 0.015
    # 响应由未污染的设计生成
    npt.assert_allclose(sim.log_failure_time - sim.errors, sim.clean_covariates @ np.array([1.2, 1.5]), atol=1e-12)


def test_contamination_before_response():
    scenario = SimulationScenario(
        n_clusters=50,
        contamination=Contamination.FIVE_PCT_PLUS5,
        contamination_timing=ContaminationTiming.BEFORE_RESPONSE,
    )
    sim = generate_dataset(scenario, RngStream(3, 1).generator(), tau=math.inf)
    npt.assert_allclose(sim.log_failure_time - sim.errors, sim.dataset.covariates @ np.array([1.2, 1.5]), atol=1e-12)


def test_uncontaminated_draws_match_contaminated_stream():
    clean = SimulationScenario(n_clusters=20)
    dirty = SimulationScenario(n_clusters=20, contamination=Contamination.FIVE_PCT_PLUS5)
    a = generate_dataset(clean, RngStream(4, 1).generator(), tau=30.0)
    b = generate_dataset(dirty, RngStream(4, 1).generator(), tau=30.0)
    # 污染掩码总是抽取，两者共享同一个数据生成
    npt.assert_array_equal(a.clean_covariates, b.clean_covariates)
    npt.assert_array_equal(a.log_censor_time, b.log_censor_time)


@pytest.mark.parametrize("law", list(ErrorLaw))
def test_calibrate_tau_hits_target(law):
    scenario = SimulationScenario(n_clusters=2000, error_law=law, censoring_target=0.3, n_pilot=100_000)
    tau = calibrate_tau(scenario, RngStream(11, 0).generator(), scenario.n_pilot)
    sim = generate_dataset(scenario, RngStream(11, 1).generator(), tau=tau)
    assert abs(1 - sim.dataset.delta.mean() - 0.3) < 0.015


def test_calibrate_tau_monotone():
    light = calibrate_tau(SimulationScenario(censoring_target=0.15), RngStream(8, 0).generator(), 100_000)
    heavy = calibrate_tau(SimulationScenario(censoring_target=0.30), RngStream(8, 0).generator(), 100_000)
    assert heavy < light


def test_run_scenario_summary(tiny_result):
    assert tiny_result.completed + tiny_result.failures == 4
    assert tiny_result.replicate_index == sorted(tiny_result.replicate_index)
    truth = np.array([1.2, 1.5])
    for name in ESTIMATORS:
        summary = tiny_result.estimators[name]
        betas = tiny_result.raw_betas[name]
        r = betas.shape[0]
        if r < 2:
            continue
        npt.assert_allclose(summary.bias, betas.mean(axis=0) - truth)
        npt.assert_allclose(summary.mse, summary.bias**2 + summary.evar * (r - 1) / r, rtol=1e-10)
    assert np.all(np.isnan(tiny_result.estimators["gehan"].ivar))


def test_replicate_interval_coverage():
    scenario = SimulationScenario(n_clusters=50, seed=7)
    replicate = _run_replicate(scenario, 60.0, 0, EstimatorConfig())
    assert replicate.error == ""
    beta = replicate.betas["smoothed_weighted_robust"]
    half_width = 1.959963984540054 * np.sqrt(replicate.ivar)
    npt.assert_array_equal(replicate.covered, np.abs(beta - np.array([1.2, 1.5])) <= half_width)


def test_scenario_coverage_summary(tiny_result):
    coverage = tiny_result.estimators["smoothed_weighted_robust"].coverage
    assert coverage.shape == (2,)
    assert np.all((coverage >= 0) & (coverage <= 1))
    npt.assert_allclose(coverage * tiny_result.completed, np.round(coverage * tiny_result.completed), atol=1e-12)
    for name in ("gehan", "weighted", "weighted_robust"):
        assert np.all(np.isnan(tiny_result.estimators[name].coverage))
    table = variance_table([tiny_result])
    npt.assert_allclose(table["coverage"].to_numpy(), coverage)
    payload = json.loads(emit_tables([tiny_result], formats=())["summary.json"])
    assert payload["scenarios"][0]["estimators"]["smoothed_weighted_robust"]["coverage"] == list(coverage)


def test_run_scenario_thread_independent(tiny_result):
    again = run_scenario(SimulationScenario(**TINY), threads=3)
    assert emit_tables([again]) == emit_tables([tiny_result])


def test_emit_tables_empty():
    rendered = emit_tables([], formats=("csv", "md"))
    header = rendered["bias_mse.csv"].splitlines()
    assert len(header) == 1
    assert header[0].startswith("scenario,N,error_law,rho,censoring,contamination")
    assert rendered["variance.md"].count("\n") == 2
    assert json.loads(rendered["summary.json"]) == {"scenarios": []}


def test_emit_tables_written(tiny_result, tmp_path):
    rendered = emit_tables([tiny_result], formats=("csv", "md"), out_dir=tmp_path)
    for name in ("bias_mse.csv", "bias_mse.md", "variance.csv", "variance.md", "raw_replicates.csv", "summary.json"):
        assert (tmp_path / name).read_text(encoding="utf-8") == rendered[name]
    frame = pd.read_csv(tmp_path / "bias_mse.csv")
    expected = bias_mse_table([tiny_result])
    assert list(frame.columns) == list(expected.columns)
    npt.assert_allclose(frame["MSE β̂_G"], expected["MSE β̂_G"], rtol=1e-9)
    raw = pd.read_csv(tmp_path / "raw_replicates.csv")
    assert len(raw) == tiny_result.completed * len(ESTIMATORS)


def test_emit_tables_docx(tiny_result, tmp_path):
    pytest.importorskip("docx")
    rendered = emit_tables([tiny_result], formats=("csv", "docx"), out_dir=tmp_path)
    assert (tmp_path / "simulation_tables.docx").exists()
    assert "bias_mse.md" not in rendered


def test_grids():
    quick = quick_grid()
    assert len(quick) == 4
    assert [s.replications for s in quick] == [200, 200, 300, 300]
    full = full_grid()
    assert len(full) == 32
    assert len({s.label for s in full}) == 32
    seeds = {s.label: s.seed for s in full}
    for s in quick:
        assert seeds[s.label] == s.seed


def test_scenario_seed_depends_on_base():
    s = SimulationScenario()
    assert scenario_seed(1, s) != scenario_seed(2, s)
    assert scenario_seed(1, s) == scenario_seed(1, SimulationScenario(replications=7))


def test_load_scenarios_matches_quick_grid():
    path = Path(__file__).resolve().parents[1] / "data" / "scenarios_quick.json"
    loaded = load_scenarios(path)
    assert [(s.label, s.seed, s.replications) for s in loaded] == [(s.label, s.seed, s.replications) for s in quick_grid()]
    assert [s.replications for s in load_scenarios(path, replications=5)] == [5] * 4


def test_load_scenarios_explicit_seed(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"scenarios": [{"n_clusters": 20, "seed": 3}, {"n_clusters": 20}]}), encoding="utf-8")
    a, b = load_scenarios(path, seed=10)
    assert a.seed == 3
    assert b.seed == scenario_seed(10, b)


@pytest.mark.parametrize(
    "text",
    ["not json", json.dumps({"cells": []}), json.dumps({"scenarios": [{"rho": 1.5}]}), json.dumps({"scenarios": [{"error_law": "cauchy"}]})],
)
def test_load_scenarios_errors(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ValueError):
        load_scenarios(path)


def test_scenario_validation():
    with pytest.raises(ValueError):
        SimulationScenario(cluster_size_min=5, cluster_size_max=4)
    with pytest.raises(ValueError):
        SimulationScenario(censoring_target=0.0)


@pytest.mark.parametrize("rho", [0.0, 0.5])
def test_within_cluster_error_correlation(rho):
    scenario = SimulationScenario(n_clusters=3000, rho=rho)
    sim = generate_dataset(scenario, RngStream(6, 1).generator(), tau=math.inf)
    starts = np.concatenate([[0], np.cumsum(sim.dataset.cluster_sizes)[:-1]])
    first, second = sim.errors[starts], sim.errors[starts + 1]
    assert abs(np.corrcoef(first, second)[0, 1] - rho) < 0.05
