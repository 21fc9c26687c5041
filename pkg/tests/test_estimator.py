import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from utils.aft import oracles
from utils.aft.data import ClusteredDataset, validate_dataset
from utils.aft.estimator import (
    EstimatorConfig,
    NumericalFailure,
    Variant,
    _ridged_step,
    fit,
    initial_beta,
    jacobian_smoothed,
    objective_nonsmooth,
    objective_smoothed,
    pair_radius,
    score_nonsmooth,
    score_smoothed,
)
from utils.aft.weights import WeightSet


def test_tiny_gehan_score_by_hand(tiny_data):
    unit = WeightSet.unit(tiny_data)
    beta = np.zeros(2)
    # e = (0.5, 1.0, 2.0)；Δ = (1, 0, 1)
    # 观测 1 的风险集 {1,2,3}，观测 3 的风险集 {3}
    x = tiny_data.covariates
    expected = ((x[0] - x[1]) + (x[0] - x[2])) / 4
    npt.assert_allclose(score_nonsmooth(tiny_data, unit, beta), expected)
    npt.assert_allclose(objective_nonsmooth(tiny_data, unit, beta), ((1.0 - 0.5) + (2.0 - 0.5)) / 4)


@pytest.mark.parametrize("seed", range(10))
def test_sorted_matches_pairwise(seed):
    rng = np.random.default_rng(seed)
    data = oracles.random_dataset(rng, n_clusters=8, max_size=6, p=3)
    weights = oracles.random_weights(rng, data)
    beta = rng.normal(size=3)
    npt.assert_allclose(
        score_nonsmooth(data, weights, beta, "sorted"), score_nonsmooth(data, weights, beta, "pairwise"), rtol=1e-10, atol=1e-13
    )
    npt.assert_allclose(
        objective_nonsmooth(data, weights, beta, "sorted"), objective_nonsmooth(data, weights, beta, "pairwise"), rtol=1e-10
    )


def test_sorted_handles_ties():
    data = validate_dataset(
        ClusteredDataset.from_arrays([1.0, 1.0, 2.0, 1.0], [1, 1, 0, 1], [[0.0], [1.0], [2.0], [3.0]], [0, 0, 1, 1])
    )
    unit = WeightSet.unit(data)
    beta = np.zeros(1)
    npt.assert_allclose(score_nonsmooth(data, unit, beta, "sorted"), oracles.score_nonsmooth(data, unit, beta), atol=1e-15)
    npt.assert_allclose(objective_nonsmooth(data, unit, beta, "sorted"), oracles.objective_nonsmooth(data, unit, beta), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_against_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    data = oracles.random_dataset(rng, n_clusters=3, max_size=3, p=2)
    weights = oracles.random_weights(rng, data)
    beta = rng.normal(size=2)
    gamma2 = np.array([[1.5, 0.3], [0.3, 0.8]])
    npt.assert_allclose(score_nonsmooth(data, weights, beta), oracles.score_nonsmooth(data, weights, beta), rtol=1e-10, atol=1e-14)
    npt.assert_allclose(score_smoothed(data, weights, beta, gamma2), oracles.score_smoothed(data, weights, beta, gamma2), rtol=1e-10, atol=1e-14)
    npt.assert_allclose(objective_smoothed(data, weights, beta, gamma2), oracles.objective_smoothed(data, weights, beta, gamma2), rtol=1e-10)
    npt.assert_allclose(
        jacobian_smoothed(data, weights, beta, gamma2), oracles.jacobian_smoothed(data, weights, beta, gamma2), rtol=1e-10, atol=1e-14
    )


def test_pair_radius_zero_for_identical_covariates():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    r = pair_radius(x, np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert r[0, 1] == 0.0 and r[1, 0] == 0.0
    npt.assert_allclose(r[0, 2], np.sqrt(2 * 1 + 2 * 0.5 * 2 + 4))


def test_identical_covariates_give_zero_smoothed_score():
    data = validate_dataset(
        ClusteredDataset.from_arrays([0.1, 0.4, 0.2, 0.9], [1, 1, 0, 1], np.ones((4, 2)), [0, 0, 1, 1])
    )
    unit = WeightSet.unit(data)
    npt.assert_array_equal(score_smoothed(data, unit, np.zeros(2), np.eye(2)), 0.0)
    npt.assert_array_equal(jacobian_smoothed(data, unit, np.zeros(2), np.eye(2)), 0.0)


def test_gradient_identities(small_random):
    data, weights = small_random
    beta = np.array([0.3, -0.2])
    gamma2 = np.eye(2)
    step = 1e-6
    grad = np.array(
        [
            (objective_smoothed(data, weights, beta + d, gamma2) - objective_smoothed(data, weights, beta - d, gamma2)) / (2 * step)
            for d in np.eye(2) * step
        ]
    )
    npt.assert_allclose(grad, score_smoothed(data, weights, beta, gamma2), rtol=1e-5, atol=1e-9)
    jac = np.array(
        [
            (score_smoothed(data, weights, beta + d, gamma2) - score_smoothed(data, weights, beta - d, gamma2)) / (2 * step)
            for d in np.eye(2) * step
        ]
    ).T
    npt.assert_allclose(jac, jacobian_smoothed(data, weights, beta, gamma2), rtol=1e-5, atol=1e-9)


def test_jacobian_symmetric_psd(small_random):
    data, weights = small_random
    jac = jacobian_smoothed(data, weights, np.array([0.1, 0.1]), np.eye(2))
    npt.assert_allclose(jac, jac.T, atol=1e-15)
    assert np.linalg.eigvalsh(jac).min() >= -1e-14


def test_objective_convex_along_segment(small_random):
    data, weights = small_random
    a, b = np.array([-1.0, 0.5]), np.array([1.0, -0.3])
    for t in np.linspace(0.1, 0.9, 5):
        mid = objective_nonsmooth(data, weights, t * a + (1 - t) * b)
        assert mid <= t * objective_nonsmooth(data, weights, a) + (1 - t) * objective_nonsmooth(data, weights, b) + 1e-12


def test_initial_beta_recovers_uncensored_line(rng):
    x = rng.normal(size=(60, 2))
    data = validate_dataset(
        ClusteredDataset.from_arrays(0.7 + x @ np.array([1.0, -2.0]), np.ones(60, dtype=int), x, np.repeat(np.arange(20), 3))
    )
    npt.assert_allclose(initial_beta(data), [1.0, -2.0], atol=1e-10)


def test_config_validation():
    with pytest.raises(ValidationError):
        EstimatorConfig(newton_tol=0.0)
    with pytest.raises(ValidationError):
        EstimatorConfig(gamma_init=[[1.0, 2.0], [2.0, 1.0]])
    config = EstimatorConfig(variant="gehan", gamma_init=[[4.0, 0.0], [0.0, 4.0]])
    assert config.variant is Variant.GEHAN
    npt.assert_array_equal(config.gamma_matrix(2), 4 * np.eye(2))
    with pytest.raises(ValueError):
        config.gamma_matrix(3)


def test_ridged_step_rejects_zero_jacobian():
    with pytest.raises(NumericalFailure):
        _ridged_step(np.zeros((2, 2)), np.ones(2))


def test_ridged_step_handles_near_singular():
    jac = np.array([[1.0, 1.0], [1.0, 1.0]])
    step = _ridged_step(jac, np.array([1.0, 1.0]))
    assert np.all(np.isfinite(step))


def test_smoothed_fit_solves_score(simulated):
    data = simulated.dataset
    result = fit(data, EstimatorConfig(variant=Variant.GEHAN), WeightSet.unit(data))
    assert result.converged
    assert result.score_norm <= 1e-8
    npt.assert_allclose(result.beta_hat.beta, [1.2, 1.5], atol=0.4)


def test_nonsmooth_fit_near_smoothed(simulated):
    data = simulated.dataset
    unit = WeightSet.unit(data)
    smooth = fit(data, EstimatorConfig(variant=Variant.GEHAN), unit)
    rough = fit(data, EstimatorConfig(variant=Variant.GEHAN, smoothed=False), unit)
    assert rough.converged
    assert rough.objective <= objective_nonsmooth(data, unit, smooth.beta_hat) + 1e-12
    npt.assert_allclose(rough.beta_hat.beta, smooth.beta_hat.beta, atol=0.1)


def test_shift_invariance_of_fit(simulated):
    data = simulated.dataset
    unit = WeightSet.unit(data)
    base = fit(data, EstimatorConfig(variant=Variant.GEHAN), unit)
    shifted = fit(data.shifted(2.5), EstimatorConfig(variant=Variant.GEHAN), unit)
    npt.assert_allclose(shifted.beta_hat.beta, base.beta_hat.beta, atol=1e-7)


def test_cluster_reordering_invariance(simulated, rng):
    data = simulated.dataset
    permuted = data.permute_clusters(rng.permutation(data.N))
    a = fit(data, EstimatorConfig(variant=Variant.GEHAN), WeightSet.unit(data))
    b = fit(permuted, EstimatorConfig(variant=Variant.GEHAN), WeightSet.unit(permuted))
    npt.assert_allclose(a.beta_hat.beta, b.beta_hat.beta, atol=1e-8)


def test_gehan_equals_unit_weighted(simulated):
    data = simulated.dataset
    unit = WeightSet.unit(data)
    a = fit(data, EstimatorConfig(variant=Variant.GEHAN), unit)
    b = fit(data, EstimatorConfig(variant=Variant.WEIGHTED), unit)
    npt.assert_array_equal(a.beta_hat.beta, b.beta_hat.beta)


@pytest.mark.parametrize("direction", [(1.0, 0.0), (0.6, -0.8), (-0.3, 1.0)])
def test_nonsmooth_score_monotone_along_line(small_random, direction):
    data, weights = small_random
    u = np.asarray(direction)
    beta = np.array([0.2, -0.1])
    along = [float(u @ score_nonsmooth(data, weights, beta + t * u)) for t in np.linspace(-3.0, 3.0, 61)]
    assert np.all(np.diff(along) >= -1e-12)


def test_omega_scaling(small_random, simulated):
    data, weights = small_random
    kappa = 3.0
    scaled = WeightSet(omega=kappa * weights.omega, h=weights.h, cluster_index=weights.cluster_index)
    beta = np.array([0.4, 0.1])
    npt.assert_allclose(score_nonsmooth(data, scaled, beta), kappa**2 * score_nonsmooth(data, weights, beta), rtol=1e-12, atol=1e-15)
    npt.assert_allclose(
        score_smoothed(data, scaled, beta, np.eye(2)), kappa**2 * score_smoothed(data, weights, beta, np.eye(2)), rtol=1e-12, atol=1e-15
    )

    sim = simulated.dataset
    rng = np.random.default_rng(3)
    base = WeightSet(omega=rng.uniform(0.3, 1.0, sim.N), h=np.ones(sim.M), cluster_index=sim.cluster_index)
    big = WeightSet(omega=kappa * base.omega, h=base.h, cluster_index=base.cluster_index)
    a = fit(sim, EstimatorConfig(variant=Variant.WEIGHTED), base)
    b = fit(sim, EstimatorConfig(variant=Variant.WEIGHTED), big)
    assert a.converged and b.converged
    npt.assert_allclose(b.beta_hat.beta, a.beta_hat.beta, atol=1e-6)


def test_smoothed_approaches_nonsmooth_as_gamma_shrinks(rng):
    # 残差 (β=0 时即 log_time) 两两相差至少 0.1，无并列
    m = 18
    data = validate_dataset(
        ClusteredDataset.from_arrays(
            0.1 * rng.permutation(m), np.r_[1, rng.integers(0, 2, m - 1)], rng.normal(size=(m, 2)), np.repeat(np.arange(6), 3)
        )
    )
    weights = oracles.random_weights(rng, data)
    beta = np.zeros(2)
    gamma2 = 1e-8 * np.array([[1.0, 0.3], [0.3, 2.0]])
    gap = score_smoothed(data, weights, beta, gamma2) - score_nonsmooth(data, weights, beta)
    assert np.max(np.abs(gap)) <= 1e-6
    assert abs(objective_smoothed(data, weights, beta, gamma2) - objective_nonsmooth(data, weights, beta)) <= 1e-6
