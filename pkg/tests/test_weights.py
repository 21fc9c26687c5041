import numpy as np
import numpy.testing as npt
import pytest

from utils.aft.data import ClusteredDataset, Residuals, validate_dataset
from utils.aft.stats_prims import chisq_quantile
from utils.aft.weights import (
    DegenerateCovariateError,
    RobustScatter,
    WeightScheme,
    WeightSet,
    build_weight_set,
    estimate_rho_bar,
    gr_weights,
    omega_weights,
    robust_scatter,
)


def _dataset(sizes, rng, p=2):
    m = int(sum(sizes))
    return validate_dataset(
        ClusteredDataset.from_arrays(
            rng.normal(size=m),
            np.ones(m, dtype=int),
            rng.normal(size=(m, p)),
            np.repeat(np.arange(len(sizes)), sizes),
        )
    )


def _residuals(data, e):
    return Residuals(e=np.asarray(e, dtype=float), beta_used=None)


def test_rho_bar_perfect_within_cluster_agreement(rng):
    data = _dataset([3, 3, 3], rng)
    # 簇内残差相同 → 平均秩相同
    e = np.repeat([1.0, 2.0, 3.0], 3)
    rho = estimate_rho_bar(data, _residuals(data, e))
    assert rho > 0.5


def test_rho_bar_singletons_warn_zero(rng, caplog):
    data = _dataset([1, 1, 1, 1], rng)
    assert estimate_rho_bar(data, _residuals(data, [0.3, 0.1, 0.2, 0.4])) == 0.0
    assert "ρ̄" in caplog.text


def test_rho_bar_invariant_under_monotone_residual_transform(rng):
    data = _dataset([2, 4, 3], rng)
    e = rng.normal(size=data.M)
    base = estimate_rho_bar(data, _residuals(data, e))
    npt.assert_allclose(estimate_rho_bar(data, _residuals(data, 5 * e + 2)), base)


def test_rho_bar_two_pairs_by_hand(rng):
    data = _dataset([2, 2], rng)
    # 秩 (1,2),(3,4)，r̄=2.5：分子 2·(2² − 2.5) = 3，分母 2.5 + 2.5 = 5
    assert estimate_rho_bar(data, _residuals(data, [1.0, 2.0, 3.0, 4.0])) == pytest.approx(0.6, abs=1e-15)


def test_weights_invariant_under_cluster_reordering(rng):
    data = _dataset([2, 4, 3, 5, 3, 4], rng)
    order = rng.permutation(data.N)
    permuted = data.permute_clusters(order)
    # permuted 的第 t 个观测对应原数据的第 flat[t] 个
    flat = np.argsort(np.argsort(order)[data.cluster_index], kind="mergesort")
    npt.assert_array_equal(permuted.log_time, data.log_time[flat])

    beta = np.array([0.3, -0.2])
    a = build_weight_set(data, beta)
    b = build_weight_set(permuted, beta)
    npt.assert_allclose(b.rho_bar, a.rho_bar, rtol=1e-12)
    npt.assert_allclose(b.omega, a.omega[order], rtol=1e-12)
    npt.assert_allclose(b.h, a.h[flat], rtol=1e-12)


def test_omega_schemes(rng):
    data = _dataset([1, 2, 4], rng)
    npt.assert_array_equal(omega_weights(data, 0.3, WeightScheme.UNIT), [1, 1, 1])
    npt.assert_allclose(omega_weights(data, 0.3, "inverse_size"), [1, 0.5, 0.25])
    npt.assert_allclose(omega_weights(data, 0.5, "correlation_adjusted"), [1, 1 / 1.5, 1 / 2.5])
    # ρ̄ 截断到 [0, 0.99]
    npt.assert_allclose(omega_weights(data, -0.4, "correlation_adjusted"), [1, 1, 1])
    npt.assert_allclose(omega_weights(data, 3.0, "correlation_adjusted"), 1 / (1 + np.array([0, 1, 3]) * 0.99))


def test_robust_scatter_univariate():
    x = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    scatter = robust_scatter(x.reshape(-1, 1))
    npt.assert_allclose(scatter.center, [3.0])
    npt.assert_allclose(scatter.scatter, [[1.4826**2]], rtol=1e-5)


def test_robust_scatter_resists_outliers(rng):
    x = rng.normal(size=(400, 2))
    x[:20] += 50.0
    scatter = robust_scatter(x)
    npt.assert_allclose(scatter.center, [0, 0], atol=0.3)
    npt.assert_allclose(np.diag(scatter.scatter), [1, 1], rtol=0.35)
    assert np.all(np.linalg.eigvalsh(scatter.scatter) > 0)


def test_robust_scatter_degenerate_column_named():
    x = np.column_stack([np.r_[np.zeros(9), 1.0], np.arange(10.0)])
    with pytest.raises(DegenerateCovariateError) as info:
        robust_scatter(x, ["binary", "z"])
    assert info.value.column == "binary"


def test_gr_weights_boundaries():
    scatter = RobustScatter(center=np.zeros(2), scatter=np.eye(2))
    c = chisq_quantile(0.95, 2)
    design = np.array([[0.0, 0.0], [1.0, 0.0], [np.sqrt(4 * c), 0.0]])
    h = gr_weights(design, scatter)
    npt.assert_allclose(h, [1.0, 1.0, 0.25])


def test_gr_weights_in_unit_interval(rng):
    x = rng.normal(size=(200, 3))
    x[0] = [40, -40, 40]
    h = gr_weights(x, robust_scatter(x))
    assert np.all((h > 0) & (h <= 1))
    assert h[0] < 0.01


def test_weight_set_for_variant(rng):
    data = _dataset([2, 3], rng)
    ws = WeightSet(omega=np.array([0.5, 0.25]), h=np.linspace(0.2, 1, 5), rho_bar=0.4, cluster_index=data.cluster_index)
    npt.assert_array_equal(ws.for_variant("gehan").observation_weights(), np.ones(5))
    npt.assert_allclose(ws.for_variant("weighted").observation_weights(), [0.5, 0.5, 0.25, 0.25, 0.25])
    npt.assert_allclose(ws.for_variant("weighted_robust").observation_weights(), ws.omega[data.cluster_index] * ws.h)


def test_weight_set_rejects_bad_values(rng):
    with pytest.raises(ValueError):
        WeightSet(omega=np.array([0.0]), h=np.array([1.0]))
    with pytest.raises(ValueError):
        WeightSet(omega=np.array([1.0]), h=np.array([1.2]))


def test_build_weight_set_drops_degenerate(rng, caplog):
    sizes = [4] * 10
    data = _dataset(sizes, rng)
    binary = np.r_[np.ones(35), np.zeros(5)]
    data = validate_dataset(
        ClusteredDataset.from_arrays(
            data.log_time, data.delta, np.column_stack([data.covariates, binary]), data.cluster_index,
            covariate_names=["a", "b", "flag"],
        )
    )
    with pytest.raises(DegenerateCovariateError):
        build_weight_set(data, np.zeros(3))
    ws = build_weight_set(data, np.zeros(3), drop_degenerate=True)
    assert "flag" in caplog.text
    assert ws.h.shape == (data.M,)
    assert np.all((ws.h > 0) & (ws.h <= 1))


def test_drop_degenerate_uses_scatter_rule(rng, caplog):
    # MAD 约 1e-8，绝对值不为 0，但相对中位数 1e6 可忽略
    m = 40
    design = np.column_stack([rng.normal(size=(m, 2)), 1e6 + 1e-8 * rng.normal(size=m)])
    with pytest.raises(DegenerateCovariateError):
        robust_scatter(design, ["a", "b", "big"])
    data = validate_dataset(
        ClusteredDataset.from_arrays(
            rng.normal(size=m), np.ones(m, dtype=int), design, np.repeat(np.arange(10), 4),
            covariate_names=["a", "b", "big"],
        )
    )
    ws = build_weight_set(data, np.zeros(3), drop_degenerate=True)
    assert "big" in caplog.text
    assert np.all((ws.h > 0) & (ws.h <= 1))


def test_build_weight_set_without_robust(rng):
    data = _dataset([3, 3, 3, 3], rng)
    ws = build_weight_set(data, np.zeros(2), scheme="unit", robust=False)
    npt.assert_array_equal(ws.h, np.ones(data.M))
    npt.assert_array_equal(ws.omega, np.ones(data.N))
