"""夹心协方差与 Γ 迭代.

ξ̂ 的下标约定：z 视为目标 (i,k) 与枢轴 (j,f) 的函数，(r,s)、(m,t) 为 z 内部的求和哑标。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import ClusteredDataset, Parameters
from .estimator import (
    EstimatorConfig,
    FitResult,
    NumericalFailure,
    Variant,
    fit,
    initial_beta,
    jacobian_smoothed,
    solve_smoothed,
)
from .weights import WeightScheme, WeightSet, _floor_spd, build_weight_set

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SandwichResult:
    """Σ̂ = D̃⁻¹ V̂ D̃⁻¹ 及其组成部分；std_errors = sqrt(diag(Σ̂)/N)."""

    v_hat: np.ndarray
    d_matrix: np.ndarray
    sigma_hat: np.ndarray
    std_errors: np.ndarray


def _flat(data: ClusteredDataset, index) -> int:
    """接受展平下标或 (i, k) 二元组 (均从 0 开始)."""
    if isinstance(index, tuple):
        cluster, member = index
        starts = np.concatenate([[0], np.cumsum(data.cluster_sizes)[:-1]])
        if not (0 <= member < data.cluster_sizes[cluster]):
            raise IndexError(f"簇 {cluster} 无第 {member} 个成员")
        return int(starts[cluster]) + int(member)
    return int(index)


def _parts(data: ClusteredDataset, weights: WeightSet, beta):
    b = beta.beta if isinstance(beta, Parameters) else np.asarray(beta, dtype=float)
    e = data.log_time - data.covariates @ b
    omega = weights.omega[data.cluster_index]
    return e, omega, weights.h, omega * weights.h, data.delta.astype(float)


def z_term(data: ClusteredDataset, weights: WeightSet, beta, target, pivot) -> np.ndarray:
    """
    z(ik; jf) = Σ_rs ω_r h_rs (X_ik − X_rs) I(e_rs ≥ e_jf) / Σ_mt I(e_mt ≥ e_jf)

    Args:
        target: (i,k) 的展平下标或二元组
        pivot: (j,f) 的展平下标或二元组
    """
    e, _, _, wh, _ = _parts(data, weights, beta)
    a, piv = _flat(data, target), _flat(data, pivot)
    at_risk = e >= e[piv]
    count = int(at_risk.sum())
    assert count >= 1, "风险集为空"
    X = data.covariates
    diff = X[a] * wh[at_risk].sum() - wh[at_risk] @ X[at_risk]
    return diff / count


def _xi_naive(data: ClusteredDataset, weights: WeightSet, beta) -> np.ndarray:
    e, omega, _, wh, delta = _parts(data, weights, beta)
    X, n = data.covariates, data.N
    m = data.M
    xi = np.zeros((m, data.p))
    for piv in range(m):
        at_risk = e >= e[piv]
        count = at_risk.sum()
        # 所有目标对该枢轴的 z，形状 M×p
        z = (X * wh[at_risk].sum() - wh[at_risk] @ X[at_risk]) / count
        later = e < e[piv]
        xi[later] += (delta[later] / n)[:, None] * wh[piv] * (X[later] - X[piv])
        xi[~later] -= omega[piv] * delta[piv] / n * z[~later]
    return xi


def _xi_sorted(data: ClusteredDataset, weights: WeightSet, beta) -> np.ndarray:
    e, omega, _, wh, delta = _parts(data, weights, beta)
    X, n = data.covariates, data.N
    p = data.p
    order = np.argsort(e, kind="mergesort")
    se = e[order]
    tail_w = np.concatenate([np.cumsum(wh[order][::-1])[::-1], [0.0]])
    tail_wx = np.vstack([np.cumsum((wh[:, None] * X)[order][::-1], axis=0)[::-1], np.zeros((1, p))])

    # 第一项：枢轴残差严格大于 e_ik
    after = np.searchsorted(se, e, side="right")
    first = (delta / n)[:, None] * (X * tail_w[after][:, None] - tail_wx[after])

    # 第二项：枢轴残差 ≤ e_ik，枢轴 t 的风险集为排序位置 ≥ start_t
    start = np.searchsorted(se, se, side="left")
    count = (se.size - start).astype(float)
    g = omega[order] * delta[order] / (n * count)
    head_a = np.concatenate([[0.0], np.cumsum(g * tail_w[start])])
    head_b = np.vstack([np.zeros((1, p)), np.cumsum(g[:, None] * tail_wx[start], axis=0)])
    second = X * head_a[after][:, None] - head_b[after]
    return first - second


def xi_terms(data: ClusteredDataset, weights: WeightSet, beta, method: str = "sorted") -> np.ndarray:
    """
    ξ̂_ik(β)，返回 M×p 矩阵

    外层 ω_j 同时乘两项。method="sorted" 用排序残差上的前缀和，O(M log M)；
    method="naive" 逐枢轴直接求和，O(M²)。
    """
    if method == "sorted":
        return _xi_sorted(data, weights, beta)
    if method == "naive":
        return _xi_naive(data, weights, beta)
    raise ValueError(f"未知的 method: {method}")


def _psd_floor(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    values, vectors = linalg.eigh(sym)
    out = (vectors * np.maximum(values, 0.0)) @ vectors.T
    return (out + out.T) / 2.0


def v_hat(data: ClusteredDataset, weights: WeightSet, beta, method: str = "sorted") -> np.ndarray:
    """V̂ = N⁻¹ Σ_i ω_i² (Σ_k h_ik ξ̂_ik)(Σ_l h_il ξ̂_il)ᵀ，对称化并把负特征值截到 0."""
    xi = xi_terms(data, weights, beta, method=method)
    omega = weights.omega[data.cluster_index]
    per_cluster = np.zeros((data.N, data.p))
    np.add.at(per_cluster, data.cluster_index, (omega * weights.h)[:, None] * xi)
    return _psd_floor(per_cluster.T @ per_cluster / data.N)


def _sandwich_at(data: ClusteredDataset, weights: WeightSet, beta, gamma2: np.ndarray) -> SandwichResult:
    d_matrix = jacobian_smoothed(data, weights, beta, gamma2)
    middle = v_hat(data, weights, beta)
    values = linalg.eigvalsh(d_matrix)
    scale = max(float(np.max(np.abs(values))), np.finfo(float).tiny)
    if not np.all(np.isfinite(values)) or float(values.min()) <= 1e-12 * scale:
        raise NumericalFailure(f"D̃ 奇异: 特征值 {values}")
    d_inv = linalg.inv(d_matrix)
    sigma = d_inv @ middle @ d_inv
    sigma = (sigma + sigma.T) / 2.0
    std_errors = np.sqrt(np.maximum(np.diag(sigma), 0.0) / data.N)
    return SandwichResult(v_hat=middle, d_matrix=d_matrix, sigma_hat=sigma, std_errors=std_errors)


def sandwich(data: ClusteredDataset, weights: WeightSet, fit_result: FitResult) -> SandwichResult:
    """
    Σ̂ = D̃⁻¹ V̂ D̃⁻¹，D̃ 取拟合时的 Γ²

    Raises:
        NumericalFailure: D̃ 奇异
    """
    if fit_result.gamma is None:
        raise ValueError("夹心估计需要光滑拟合的 Γ²")
    if not fit_result.converged:
        logger.warning("[variance] 拟合未收敛，夹心估计仅供参考")
    return _sandwich_at(data, weights, fit_result.beta_hat, fit_result.gamma)


def iterate_fit(
    data: ClusteredDataset,
    config: EstimatorConfig,
    weights: WeightSet,
) -> tuple[FitResult, SandwichResult]:
    """
    交替更新 β 与 Γ²

    (a) 固定 Γ² 牛顿解 S̃ = 0；(b) Γ² ← floor(sym(D̃⁻¹ V̂ D̃⁻¹))。
    ‖Δβ‖∞ 与 ‖ΔΓ²‖∞ 同时低于容差即停；达到外层上限时报告未收敛。
    返回的 FitResult.gamma 是产生 β̂ 的那个 Γ²，SandwichResult 在同一 (β̂, Γ²) 处计算。
    """
    used = weights.for_variant(config.variant)
    gamma2 = config.gamma_matrix(data.p)
    beta = initial_beta(data)
    history: list[dict] = []
    converged = False
    newton_ok = False
    score = np.zeros(data.p)
    objective = float("nan")
    iterations = 0
    result: SandwichResult | None = None

    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        beta_new, score, its, newton_ok, objective = solve_smoothed(data, used, gamma2, config, beta0=beta)
        iterations += its
        result = _sandwich_at(data, used, beta_new, gamma2)
        gamma_new = _floor_spd(result.sigma_hat)
        step_beta = float(np.max(np.abs(beta_new - beta)))
        step_gamma = float(np.max(np.abs(gamma_new - gamma2)))
        history.append(
            {
                "outer": outer,
                "beta": beta_new.tolist(),
                "step_beta": step_beta,
                "step_gamma": step_gamma,
                "newton_iterations": its,
                "score_norm": float(np.max(np.abs(score))),
            }
        )
        logger.debug(f"[variance] 外层第 {outer} 轮 Δβ={step_beta:.2e} ΔΓ²={step_gamma:.2e}")
        beta = beta_new
        if step_beta <= config.outer_beta_tol and step_gamma <= config.outer_gamma_tol:
            converged = True
            break
        if outer < config.max_outer_iters:
            gamma2 = gamma_new

    if not converged:
        logger.warning(f"[variance] Γ 迭代 {config.max_outer_iters} 轮未收敛")

    fit_result = FitResult(
        beta_hat=Parameters(beta),
        gamma=gamma2,
        score_norm=float(np.max(np.abs(score))),
        objective=objective,
        iterations=iterations,
        converged=converged and newton_ok,
        weight_set=used,
        variant=config.variant,
        smoothed=True,
        outer_iterations=outer,
        history=history,
    )
    return fit_result, result


@dataclass
class EstimatorSuite:
    """一次完整流程的四个估计量."""

    gehan: FitResult
    weighted: FitResult
    weighted_robust: FitResult
    smoothed: FitResult
    sandwich: SandwichResult
    weights: WeightSet

    def as_dict(self) -> dict[str, FitResult]:
        return {
            "gehan": self.gehan,
            "weighted": self.weighted,
            "weighted_robust": self.weighted_robust,
            "smoothed_weighted_robust": self.smoothed,
        }

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.as_dict().values())


def fit_estimators(
    data: ClusteredDataset,
    base: EstimatorConfig | None = None,
    scheme: WeightScheme | str = WeightScheme.CORRELATION_ADJUSTED,
    alpha: float = 2.0,
    c_quantile: float = 0.95,
    robust: bool = True,
    drop_degenerate: bool = False,
) -> EstimatorSuite:
    """
    四个估计量的完整流程

    非光滑 Gehan 初估 → 由其残差求 ρ̄ 与 h → 非光滑 β̂_ω、β̂_ωh → 迭代光滑 β̃_ωh 与 Σ̂。
    """
    base = base or EstimatorConfig()

    def config_for(variant: Variant, smoothed: bool) -> EstimatorConfig:
        return EstimatorConfig(
            **{**_config_fields(base), "variant": variant, "smoothed": smoothed}
        )

    unit = WeightSet.unit(data)
    gehan = fit(data, config_for(Variant.GEHAN, False), unit)
    weights = build_weight_set(
        data,
        gehan.beta_hat,
        scheme=scheme,
        alpha=alpha,
        c_quantile=c_quantile,
        robust=robust,
        drop_degenerate=drop_degenerate,
    )
    weighted = fit(data, config_for(Variant.WEIGHTED, False), weights)
    weighted_robust = fit(data, config_for(Variant.WEIGHTED_ROBUST, False), weights)
    smoothed, result = iterate_fit(data, config_for(Variant.WEIGHTED_ROBUST, True), weights)
    return EstimatorSuite(
        gehan=gehan,
        weighted=weighted,
        weighted_robust=weighted_robust,
        smoothed=smoothed,
        sandwich=result,
        weights=weights,
    )


def _config_fields(config: EstimatorConfig) -> dict:
    return {name: getattr(config, name) for name in config.__dataclass_fields__}
