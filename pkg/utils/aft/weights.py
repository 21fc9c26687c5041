"""权重.

两类权重：
- ω_i：簇级相关权重，处理簇内相关与簇大小不等
- h_ik：GR (generalized rank) 协变量权重，基于稳健马氏距离下调协变量离群点
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import linalg, stats

from .data import ClusteredDataset, DatasetError, Parameters, Residuals, compute_residuals
from .stats_prims import chisq_quantile, midranks

logger = logging.getLogger(__name__)

RHO_CLAMP = (0.0, 0.99)
MAD_FLOOR = 1e-12


class WeightScheme(Enum):
    """ω 的选取方式."""

    UNIT = "unit"
    INVERSE_SIZE = "inverse_size"
    CORRELATION_ADJUSTED = "correlation_adjusted"


class DegenerateCovariateError(DatasetError):
    """协变量列的 MAD 为 0，无法估计稳健尺度."""


@dataclass(frozen=True)
class WeightSet:
    """
    一组权重

    omega 长度 N（按簇），h 长度 M（按展平顺序）。
    """

    omega: np.ndarray
    h: np.ndarray
    rho_bar: float = 0.0
    scheme: WeightScheme = WeightScheme.UNIT
    cluster_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        if np.any(self.omega <= 0):
            raise ValueError("ω 必须全部为正")
        if np.any(self.h <= 0) or np.any(self.h > 1):
            raise ValueError("h 必须落在 (0, 1]")

    @classmethod
    def unit(cls, data: ClusteredDataset) -> WeightSet:
        return cls(
            omega=np.ones(data.N),
            h=np.ones(data.M),
            rho_bar=0.0,
            scheme=WeightScheme.UNIT,
            cluster_index=data.cluster_index,
        )

    def observation_weights(self, data: ClusteredDataset | None = None) -> np.ndarray:
        """每个观测的乘积权重 ω_i·h_ik."""
        index = self.cluster_index if data is None else data.cluster_index
        if index is None:
            raise ValueError("缺少簇索引，无法展开 ω")
        return self.omega[index] * self.h

    def for_variant(self, variant) -> WeightSet:
        """按估计量变体裁剪权重：gehan 全 1，weighted 令 h≡1，weighted_robust 原样."""
        name = getattr(variant, "value", variant)
        if name == "gehan":
            return replace(
                self,
                omega=np.ones_like(self.omega),
                h=np.ones_like(self.h),
                scheme=WeightScheme.UNIT,
            )
        if name == "weighted":
            return replace(self, h=np.ones_like(self.h))
        return self


@dataclass(frozen=True)
class RobustScatter:
    """稳健位置与散布估计."""

    center: np.ndarray
    scatter: np.ndarray
    method: str = "ogk"


def estimate_rho_bar(data: ClusteredDataset, residuals: Residuals) -> float:
    """
    簇内平均相关的矩估计 ρ̄

    残差在全部 M 个观测上取平均秩，r̄ = (M+1)/2；分子对簇内有序对 j≠l 求和。

    Args:
        data: 数据集
        residuals: 在一致初值 (通常为 Gehan 估计) 处的残差

    Returns:
        ρ̄ 的矩估计（未截断）
    """
    ranks = midranks(residuals.e)
    centered = ranks - (data.M + 1) / 2.0
    n_clusters = data.N
    cluster_sum = np.bincount(data.cluster_index, weights=centered, minlength=n_clusters)
    cluster_sq = np.bincount(data.cluster_index, weights=centered**2, minlength=n_clusters)
    sizes = data.cluster_sizes
    denominator = float(np.sum((sizes - 1) * cluster_sq))
    if np.all(sizes == 1) or denominator == 0.0:
        logger.warning("[weights] 所有簇均为单元素或秩离差为 0，ρ̄ 取 0")
        return 0.0
    numerator = float(np.sum(cluster_sum**2 - cluster_sq))
    return numerator / denominator


def omega_weights(data: ClusteredDataset, rho_bar: float, scheme: WeightScheme | str) -> np.ndarray:
    """按方案计算 ω；ρ̄ 先截断到 [0, 0.99]."""
    scheme = WeightScheme(scheme)
    if not np.isfinite(rho_bar):
        raise ValueError(f"ρ̄ 非有限: {rho_bar}")
    sizes = data.cluster_sizes.astype(float)
    if scheme is WeightScheme.UNIT:
        return np.ones(data.N)
    if scheme is WeightScheme.INVERSE_SIZE:
        return 1.0 / sizes
    rho = float(np.clip(rho_bar, *RHO_CLAMP))
    return 1.0 / (1.0 + (sizes - 1.0) * rho)


def _mad_scale(values: np.ndarray) -> float:
    return float(stats.median_abs_deviation(values, scale="normal"))


def _mad_degenerate(values: np.ndarray) -> bool:
    """MAD 相对 |中位数| 可忽略时视为退化列."""
    return not _mad_scale(values) > MAD_FLOOR * max(1.0, abs(float(np.median(values))))


def robust_scatter(design: np.ndarray, names: list[str] | tuple[str, ...] | None = None) -> RobustScatter:
    """
    OGK 型稳健散布估计（确定性）

    位置取逐列中位数；两两稳健协方差用 Gnanadesikan–Kettenring 恒等式
    cov(a,b) = [σ(a+b)² − σ(a−b)²]/4，σ 为正态化 MAD (×1.4826)；
    再在特征基上用稳健方差重建以恢复正定性，最后按 1e-8·trace/p 截断特征值。

    Args:
        design: M×p 设计矩阵
        names: 列名，用于报错

    Returns:
        RobustScatter
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    m, p = design.shape
    if m <= p:
        raise ValueError(f"观测数须大于维度: M={m}, p={p}")
    names = list(names) if names else [f"x{j + 1}" for j in range(p)]

    center = np.median(design, axis=0)
    scales = np.array([_mad_scale(design[:, j]) for j in range(p)])
    for j in range(p):
        if _mad_degenerate(design[:, j]):
            raise DegenerateCovariateError(f"协变量 MAD 为 0: 列 {names[j]}", column=names[j])

    standardized = design / scales
    pairwise = np.eye(p)
    for a in range(p):
        for b in range(a + 1, p):
            plus = _mad_scale(standardized[:, a] + standardized[:, b])
            minus = _mad_scale(standardized[:, a] - standardized[:, b])
            pairwise[a, b] = pairwise[b, a] = (plus**2 - minus**2) / 4.0

    _, basis = linalg.eigh(pairwise)
    projected = standardized @ basis
    variances = np.array([_mad_scale(projected[:, j]) ** 2 for j in range(p)])
    scatter = (scales[:, None] * basis) @ np.diag(variances) @ (scales[:, None] * basis).T
    scatter = _floor_spd(scatter)
    return RobustScatter(center=center, scatter=scatter, method="ogk")


def _floor_spd(matrix: np.ndarray, relative: float = 1e-8) -> np.ndarray:
    """对称化并把特征值抬到 relative·trace/p 以上."""
    sym = (matrix + matrix.T) / 2.0
    values, vectors = linalg.eigh(sym)
    floor = relative * max(float(np.trace(sym)), 0.0) / sym.shape[0]
    if floor <= 0:
        floor = relative
    values = np.maximum(values, floor)
    out = (vectors * values) @ vectors.T
    return (out + out.T) / 2.0


def mahalanobis_sq(design: np.ndarray, scatter: RobustScatter) -> np.ndarray:
    """d²(X) = (X − center)ᵀ scatter⁻¹ (X − center)."""
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    diff = design - scatter.center
    factor = linalg.cho_factor(scatter.scatter)
    solved = linalg.cho_solve(factor, diff.T).T
    return np.maximum(np.sum(diff * solved, axis=1), 0.0)


def gr_weights(
    design: np.ndarray,
    scatter: RobustScatter,
    alpha: float = 2.0,
    c: float | None = None,
) -> np.ndarray:
    """
    GR 权重 h = min{1, (c/d²)^{α/2}}

    Args:
        design: M×p 设计矩阵
        scatter: 稳健散布估计
        alpha: 调节常数 α
        c: 截断常数，默认 χ²_0.95(p)

    Returns:
        长度 M 的权重，d² = 0 时为 1
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    if c is None:
        c = chisq_quantile(0.95, design.shape[1])
    d2 = mahalanobis_sq(design, scatter)
    with np.errstate(divide="ignore"):
        ratio = np.where(d2 > 0, c / np.where(d2 > 0, d2, 1.0), np.inf)
    return np.minimum(1.0, ratio ** (alpha / 2.0))


def build_weight_set(
    data: ClusteredDataset,
    preliminary_beta: Parameters | np.ndarray,
    scheme: WeightScheme | str = WeightScheme.CORRELATION_ADJUSTED,
    alpha: float = 2.0,
    c_quantile: float = 0.95,
    robust: bool = True,
    drop_degenerate: bool = False,
) -> WeightSet:
    """
    由初步一致估计的残差得到 ω 与 h

    Args:
        data: 数据集
        preliminary_beta: 初始一致估计 (Gehan)
        scheme: ω 方案
        alpha: GR 权重的 α
        c_quantile: c = χ²_{c_quantile}(p)
        robust: False 时 h≡1
        drop_degenerate: True 时剔除 MAD 为 0 的列后再算马氏距离，否则报错

    Returns:
        WeightSet
    """
    scheme = WeightScheme(scheme)
    rho_bar = estimate_rho_bar(data, compute_residuals(data, preliminary_beta))
    omega = omega_weights(data, rho_bar, scheme)
    h = np.ones(data.M)
    if robust:
        design = data.covariates
        names = list(data.covariate_names)
        if drop_degenerate:
            keep = [j for j in range(data.p) if not _mad_degenerate(design[:, j])]
            dropped = [names[j] for j in range(data.p) if j not in keep]
            if dropped:
                logger.warning(f"[weights] MAD 为 0 的列不参与马氏距离: {', '.join(dropped)}")
            design = design[:, keep]
            names = [names[j] for j in keep]
        if design.shape[1] > 0:
            scatter = robust_scatter(design, names)
            c = chisq_quantile(c_quantile, design.shape[1])
            h = gr_weights(design, scatter, alpha=alpha, c=c)
    logger.info(
        f"[weights] ρ̄={rho_bar:.4f} scheme={scheme.value} "
        f"ω∈[{omega.min():.3f},{omega.max():.3f}] 下调观测数={int(np.sum(h < 1))}"
    )
    return WeightSet(omega=omega, h=h, rho_bar=rho_bar, scheme=scheme, cluster_index=data.cluster_index)
