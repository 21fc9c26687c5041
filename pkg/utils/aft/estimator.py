"""估计函数与求解器.

记号：按展平顺序的观测下标 a=(i,k)、b=(j,l)，乘积权重 w_a = ω_i·h_ik，
成对量以矩阵 [a, b] 存放。比较方向统一为 I(e_a ≤ e_b)，平滑项为
Φ(√N (e_b − e_a)/r_ab)，r²_ab = (X_a − X_b)ᵀ Γ² (X_a − X_b)。
所有求和都保留 N^{-2} 的缩放。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import Field, field_validator
from pydantic.dataclasses import dataclass as pydantic_dataclass
from scipy import linalg, optimize

from . import stats_prims
from .data import ClusteredDataset, Parameters
from .weights import WeightSet

logger = logging.getLogger(__name__)


class Variant(Enum):
    """估计量变体."""

    GEHAN = "gehan"
    WEIGHTED = "weighted"
    WEIGHTED_ROBUST = "weighted_robust"


class NumericalFailure(ArithmeticError):
    """数值失败：Jacobian 奇异或协方差不可求."""


@pydantic_dataclass
class EstimatorConfig:
    """
    估计器配置

    结的约定固定为 I(e_ik ≤ e_jl)，不做抖动；gamma_init 为 None 时取单位阵。
    """

    variant: Variant = Variant.WEIGHTED_ROBUST
    smoothed: bool = True
    newton_tol: float = Field(default=1e-8, gt=0)
    max_newton_iters: int = Field(default=100, ge=1)
    max_halvings: int = Field(default=30, ge=0)
    neldermead_tol: float = Field(default=1e-10, gt=0)
    neldermead_xtol: float = Field(default=1e-8, gt=0)
    neldermead_step: float = Field(default=0.1, gt=0)
    max_neldermead_iters: int = Field(default=5000, ge=1)
    gamma_init: list[list[float]] | None = None
    outer_beta_tol: float = Field(default=1e-6, gt=0)
    outer_gamma_tol: float = Field(default=1e-4, gt=0)
    max_outer_iters: int = Field(default=25, ge=1)

    @field_validator("gamma_init")
    @classmethod
    def _check_spd(cls, value):
        if value is None:
            return value
        matrix = np.asarray(value, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("gamma_init 必须是方阵")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise ValueError("gamma_init 必须对称")
        try:
            np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError as exc:
            raise ValueError("gamma_init 必须正定") from exc
        return value

    def gamma_matrix(self, p: int) -> np.ndarray:
        """返回初始 Γ² (p×p)."""
        if self.gamma_init is None:
            return np.eye(p)
        matrix = np.asarray(self.gamma_init, dtype=float)
        if matrix.shape != (p, p):
            raise ValueError(f"gamma_init 形状 {matrix.shape} 与 p={p} 不符")
        return matrix


@dataclass
class FitResult:
    """拟合结果."""

    beta_hat: Parameters
    gamma: np.ndarray | None
    score_norm: float
    objective: float
    iterations: int
    converged: bool
    weight_set: WeightSet
    variant: Variant = Variant.WEIGHTED_ROBUST
    smoothed: bool = True
    outer_iterations: int = 0
    history: list[dict] = field(default_factory=list)


def _obs_weights(data: ClusteredDataset, weights: WeightSet) -> np.ndarray:
    w = weights.observation_weights(data)
    if w.size != data.M:
        raise ValueError(f"权重长度 {w.size} 与观测数 M={data.M} 不一致")
    return w


def _beta_array(beta) -> np.ndarray:
    return beta.beta if isinstance(beta, Parameters) else np.asarray(beta, dtype=float).reshape(-1)


def _pair_sum_score(X: np.ndarray, pair: np.ndarray) -> np.ndarray:
    # Σ_ab pair_ab (X_a − X_b) = Xᵀ(pair·1) − Xᵀ(pairᵀ·1)
    return X.T @ pair.sum(axis=1) - X.T @ pair.sum(axis=0)


def pair_radius(X: np.ndarray, gamma2: np.ndarray) -> np.ndarray:
    """
    成对平滑半径 r_ab = sqrt((X_a − X_b)ᵀ Γ² (X_a − X_b))

    用 Γ² = LLᵀ 把设计变换为 Y = XL，r_ab = ‖Y_a − Y_b‖；协变量重合时 r 精确为 0。
    """
    factor = np.linalg.cholesky(np.asarray(gamma2, dtype=float))
    transformed = X @ factor
    r2 = np.zeros((X.shape[0], X.shape[0]))
    for c in range(transformed.shape[1]):
        diff = transformed[:, c][:, None] - transformed[:, c][None, :]
        r2 += diff * diff
    return np.sqrt(r2)


def _sorted_sums(e: np.ndarray, w: np.ndarray, X: np.ndarray):
    order = np.argsort(e, kind="mergesort")
    sorted_e = e[order]
    # 尾部累加和，末尾补 0
    w_tail = np.concatenate([np.cumsum(w[order][::-1])[::-1], [0.0]])
    wx_tail = np.vstack([np.cumsum((w[:, None] * X)[order][::-1], axis=0)[::-1], np.zeros((1, X.shape[1]))])
    we_tail = np.concatenate([np.cumsum((w * e)[order][::-1])[::-1], [0.0]])
    return sorted_e, w_tail, wx_tail, we_tail


def score_nonsmooth(
    data: ClusteredDataset,
    weights: WeightSet,
    beta,
    method: str = "sorted",
) -> np.ndarray:
    """
    非光滑加权 Gehan 估计函数 S_ωh(β)

    method="pairwise" 为朴素 O(M²) 成对求和；method="sorted" 利用乘积权重可分解，
    在排序残差上做尾部前缀和，O(M log M)，两者结果一致。
    """
    b = _beta_array(beta)
    X, delta = data.covariates, data.delta.astype(float)
    w = _obs_weights(data, weights)
    e = data.log_time - X @ b
    scale = data.N**-2
    if method == "pairwise":
        pair = (w * delta)[:, None] * w[None, :] * (e[:, None] <= e[None, :])
        return scale * _pair_sum_score(X, pair)
    if method != "sorted":
        raise ValueError(f"未知的 method: {method}")
    sorted_e, w_tail, wx_tail, _ = _sorted_sums(e, w, X)
    start = np.searchsorted(sorted_e, e, side="left")
    lead = w * delta
    return scale * (X.T @ (lead * w_tail[start]) - wx_tail[start].T @ lead)


def objective_nonsmooth(
    data: ClusteredDataset,
    weights: WeightSet,
    beta,
    method: str = "sorted",
) -> float:
    """非光滑目标 L_ωh(β) = N^{-2} Σ w_a w_b Δ_a (e_a − e_b)^−，凸分段线性."""
    b = _beta_array(beta)
    X, delta = data.covariates, data.delta.astype(float)
    w = _obs_weights(data, weights)
    e = data.log_time - X @ b
    scale = data.N**-2
    if method == "pairwise":
        gap = e[None, :] - e[:, None]
        pair = (w * delta)[:, None] * w[None, :]
        return float(scale * np.sum(pair * np.maximum(gap, 0.0)))
    if method != "sorted":
        raise ValueError(f"未知的 method: {method}")
    sorted_e, w_tail, _, we_tail = _sorted_sums(e, w, X)
    start = np.searchsorted(sorted_e, e, side="right")
    lead = w * delta
    return float(scale * np.sum(lead * (we_tail[start] - e * w_tail[start])))


class _SmoothedPairs:
    """固定 (数据, 权重, Γ²) 下的成对缓存；半径与 β 无关，只算一次."""

    def __init__(self, data: ClusteredDataset, weights: WeightSet, gamma2: np.ndarray) -> None:
        self.data = data
        self.X = data.covariates
        self.delta = data.delta.astype(float)
        self.w = _obs_weights(data, weights)
        self.radius = pair_radius(self.X, gamma2)
        self.active = self.radius > 0
        self.safe_radius = np.where(self.active, self.radius, 1.0)
        self.pair_w = (self.w * self.delta)[:, None] * self.w[None, :]
        self.sqrt_n = math.sqrt(data.N)
        self.scale = data.N**-2

    def _gap_u(self, beta: np.ndarray):
        e = self.data.log_time - self.X @ beta
        gap = e[None, :] - e[:, None]
        u = np.where(self.active, self.sqrt_n * gap / self.safe_radius, 0.0)
        return gap, u

    def score(self, beta: np.ndarray) -> np.ndarray:
        _, u = self._gap_u(beta)
        pair = np.where(self.active, self.pair_w * stats_prims.std_normal_cdf(u), 0.0)
        return self.scale * _pair_sum_score(self.X, pair)

    def objective(self, beta: np.ndarray) -> float:
        gap, u = self._gap_u(beta)
        smooth = gap * stats_prims.std_normal_cdf(u) + self.radius / self.sqrt_n * stats_prims.std_normal_pdf(u)
        term = np.where(self.active, smooth, np.maximum(gap, 0.0))
        return float(self.scale * np.sum(self.pair_w * term))

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        _, u = self._gap_u(beta)
        pair = np.where(self.active, self.pair_w * stats_prims.std_normal_pdf(u) / self.safe_radius, 0.0)
        both = pair + pair.T
        outer = (self.X * both.sum(axis=1)[:, None]).T @ self.X - self.X.T @ both @ self.X
        # Σ_ab B_ab d_ab d_abᵀ = Xᵀ diag(B1 + Bᵀ1) X − Xᵀ (B + Bᵀ) X
        jac = self.sqrt_n * self.scale * outer
        return (jac + jac.T) / 2.0


def score_smoothed(data: ClusteredDataset, weights: WeightSet, beta, gamma: np.ndarray) -> np.ndarray:
    """诱导平滑估计函数 S̃_ωh(β)；gamma 为 Γ² (对称正定)."""
    return _SmoothedPairs(data, weights, gamma).score(_beta_array(beta))


def objective_smoothed(data: ClusteredDataset, weights: WeightSet, beta, gamma: np.ndarray) -> float:
    """诱导平滑目标 L̃_ωh(β)，其梯度恰为 S̃_ωh(β)."""
    return _SmoothedPairs(data, weights, gamma).objective(_beta_array(beta))


def jacobian_smoothed(data: ClusteredDataset, weights: WeightSet, beta, gamma: np.ndarray) -> np.ndarray:
    """
    D̃_ωh(β) = ∂S̃_ωh/∂β

    对 S̃ 精确求导，含 √N 因子；对称半正定，r=0 的对贡献 0。
    """
    return _SmoothedPairs(data, weights, gamma).jacobian(_beta_array(beta))


def initial_beta(data: ClusteredDataset) -> np.ndarray:
    """仅用事件行 (Δ=1) 的 log_time 对 X 做带截距的最小二乘，返回斜率部分."""
    events = data.delta == 1
    X = data.covariates[events]
    y = data.log_time[events]
    if y.size <= data.p + 1:
        logger.warning(f"[fit] 事件数 {y.size} 不足以做最小二乘初值，改用 β=0")
        return np.zeros(data.p)
    design = np.column_stack([np.ones(y.size), X])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[1:]


def _ridged_step(jac: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    p = rhs.size
    trace = float(np.trace(jac))
    if not np.isfinite(trace) or trace <= 0:
        raise NumericalFailure(f"Jacobian 奇异: trace={trace}")
    floor = 1e-10 * trace
    min_eig = float(linalg.eigvalsh(jac).min())
    ridge = 0.0
    if min_eig < floor:
        ridge = floor - min_eig + 1e-8 * trace / p
        logger.debug(f"[fit] Jacobian 近奇异 (λ_min={min_eig:.3e})，加岭 λ={ridge:.3e}")
    for _ in range(8):
        try:
            return linalg.solve(jac + ridge * np.eye(p), rhs, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            ridge = max(10.0 * ridge, 1e-8 * trace / p)
            logger.warning(f"[fit] Jacobian 求解失败，岭参数增至 {ridge:.3e}")
    raise NumericalFailure("Jacobian 加岭后仍奇异")


def _newton(pairs: _SmoothedPairs, beta0: np.ndarray, config: EstimatorConfig):
    """阻尼牛顿法解 S̃ = 0：步长折半直到 ‖S̃‖ 下降，必要时加岭."""
    beta = np.array(beta0, dtype=float)
    score = pairs.score(beta)
    iterations = 0
    for iterations in range(1, config.max_newton_iters + 1):
        if np.max(np.abs(score)) <= config.newton_tol:
            return beta, score, iterations - 1, True
        step = _ridged_step(pairs.jacobian(beta), score)
        current = float(np.linalg.norm(score))
        for _ in range(config.max_halvings + 1):
            candidate = beta - step
            cand_score = pairs.score(candidate)
            if float(np.linalg.norm(cand_score)) < current:
                break
            step = step / 2.0
        else:
            logger.debug(f"[fit] 第 {iterations} 步折半 {config.max_halvings} 次仍未下降，停止")
            break
        beta, score = candidate, cand_score
        logger.debug(f"[fit] Newton 第 {iterations} 步 ‖S̃‖∞={np.max(np.abs(score)):.3e}")
    converged = bool(np.max(np.abs(score)) <= config.newton_tol)
    return beta, score, iterations, converged


def solve_smoothed(
    data: ClusteredDataset,
    weights: WeightSet,
    gamma2: np.ndarray,
    config: EstimatorConfig,
    beta0: np.ndarray | None = None,
):
    """在固定 Γ² 下解 S̃ = 0，返回 (β, S̃(β), 迭代数, 是否收敛, 目标值)."""
    pairs = _SmoothedPairs(data, weights, gamma2)
    start = initial_beta(data) if beta0 is None else np.asarray(beta0, dtype=float)
    beta, score, iterations, converged = _newton(pairs, start, config)
    return beta, score, iterations, converged, pairs.objective(beta)


def _nelder_mead(data: ClusteredDataset, weights: WeightSet, start: np.ndarray, config: EstimatorConfig):
    def target(b: np.ndarray) -> float:
        return objective_nonsmooth(data, weights, b)

    p = start.size
    step = config.neldermead_step
    total = 0
    result = None
    # 分段线性目标上单纯形易卡在折点，缩小步长重启一次
    for scale in (1.0, 0.1):
        simplex = np.vstack([start, start + scale * step * np.eye(p)])
        result = optimize.minimize(
            target,
            start,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "xatol": config.neldermead_xtol,
                "fatol": config.neldermead_tol,
                "maxiter": config.max_neldermead_iters,
                "maxfev": 4 * config.max_neldermead_iters,
                "adaptive": p > 3,
            },
        )
        total += int(result.nit)
        start = np.asarray(result.x, dtype=float)
    return result, total


def fit(data: ClusteredDataset, config: EstimatorConfig, weights: WeightSet) -> FitResult:
    """
    求解 β̂

    光滑路径：最小二乘初值 + 阻尼牛顿解 S̃(β; Γ²) = 0。
    非光滑路径：从光滑解出发 (失败时从最小二乘初值出发)，Nelder–Mead 最小化 L_ωh。
    不收敛时返回 converged=False；Jacobian 加岭后仍奇异时抛 NumericalFailure。

    Args:
        data: 已校验的数据集
        config: 估计器配置
        weights: build_weight_set 得到的权重，按 config.variant 裁剪

    Returns:
        FitResult
    """
    used = weights.for_variant(config.variant)
    gamma2 = config.gamma_matrix(data.p)
    logger.debug(f"[fit] variant={config.variant.value} smoothed={config.smoothed} M={data.M}")

    if config.smoothed:
        beta, score, iterations, converged, objective = solve_smoothed(data, used, gamma2, config)
        return FitResult(
            beta_hat=Parameters(beta),
            gamma=gamma2,
            score_norm=float(np.max(np.abs(score))),
            objective=objective,
            iterations=iterations,
            converged=converged,
            weight_set=used,
            variant=config.variant,
            smoothed=True,
        )

    try:
        start, *_ = solve_smoothed(data, used, gamma2, config)
    except NumericalFailure:
        logger.warning("[fit] 光滑解不可用，Nelder–Mead 从最小二乘初值出发")
        start = initial_beta(data)
    result, iterations = _nelder_mead(data, used, np.asarray(start, dtype=float), config)
    beta = np.asarray(result.x, dtype=float)
    return FitResult(
        beta_hat=Parameters(beta),
        gamma=None,
        score_norm=float(np.max(np.abs(score_nonsmooth(data, used, beta)))),
        objective=float(result.fun),
        iterations=iterations,
        converged=bool(result.success),
        weight_set=used,
        variant=config.variant,
        smoothed=False,
    )
