"""统计基础工具.

提供全包共用的确定性统计原语：
- 标准正态分布的密度与分布函数
- 卡方分位数（基于正则化不完全伽马函数求根）
- 含结的平均秩 (midrank)
- 可交换相关结构下的多元正态 / 多元 t 抽样
- 可复现的随机数流
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ExchangeableCorrelation:
    """可交换相关矩阵 Σ(ρ)：对角线为 1，非对角线为 ρ."""

    rho: float
    dim: int

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"维度必须为正整数: dim={self.dim}")
        lower = -1.0 / (self.dim - 1) if self.dim > 1 else -math.inf
        if not (lower < self.rho < 1.0):
            raise ValueError(
                f"ρ 超出正定范围 ({lower:.4g}, 1): rho={self.rho}, dim={self.dim}"
            )

    def matrix(self) -> np.ndarray:
        """返回 dim×dim 的相关矩阵."""
        corr = np.full((self.dim, self.dim), self.rho, dtype=float)
        np.fill_diagonal(corr, 1.0)
        return corr


@dataclass(frozen=True)
class RngStream:
    """由 (seed, stream_id) 唯一确定的随机数流.

    底层使用 numpy 的 PCG64 + SeedSequence，跨平台逐位可复现；
    stream_id 通过 spawn_key 派生，互不重叠。
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))


def std_normal_cdf(x):
    """标准正态分布函数 Φ(x)，支持标量与数组，±∞ 分别映射到 0/1."""
    return special.ndtr(x)


def std_normal_pdf(x):
    """标准正态密度 φ(x) = exp(-x²/2)/√(2π)."""
    x = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


def std_normal_quantile(prob: float) -> float:
    """标准正态分位数 Φ⁻¹(prob)."""
    if not (0.0 < prob < 1.0):
        raise ValueError(f"概率须在 (0,1) 内: prob={prob}")
    return float(special.ndtri(prob))


def chisq_cdf(q: float, df: int) -> float:
    """卡方分布函数 P(χ²_df ≤ q)."""
    if q <= 0:
        return 0.0
    return float(special.gammainc(df / 2.0, q / 2.0))


def chisq_quantile(prob: float, df: int) -> float:
    """
    卡方分位数

    在正则化下不完全伽马函数上做区间求根 (brentq)，上界按倍增扩展。

    Args:
        prob: 概率，须在 (0, 1) 内
        df: 自由度，正整数

    Returns:
        满足 P(χ²_df ≤ q) = prob 的 q
    """
    if not (0.0 < prob < 1.0):
        raise ValueError(f"概率须在 (0,1) 内: prob={prob}")
    if df < 1:
        raise ValueError(f"自由度须 ≥ 1: df={df}")

    def gap(q: float) -> float:
        return special.gammainc(df / 2.0, q / 2.0) - prob

    upper = max(1.0, float(df))
    while gap(upper) < 0:
        upper *= 2.0
    return float(optimize.brentq(gap, 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))


def midranks(values) -> np.ndarray:
    """平均秩：结取其覆盖位置的平均值，秩和恒为 M(M+1)/2."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("midranks 只接受有限值")
    return stats.rankdata(values, method="average")


def sample_mvn_exchangeable(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """
    单因子构造的可交换多元正态抽样

    z_k = √ρ·u + √(1-ρ)·v_k，u、v_k 独立标准正态；先抽 u，再抽 v。

    Args:
        n: 向量长度
        rho: 可交换相关系数，单因子构造要求 ρ ≥ 0
        rng: numpy 随机数生成器

    Returns:
        长度为 n 的一次抽样
    """
    ExchangeableCorrelation(rho, n)
    if rho < 0:
        raise ValueError(f"单因子构造要求 ρ ≥ 0: rho={rho}")
    shared = rng.standard_normal()
    own = rng.standard_normal(n)
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own


def sample_mvt_exchangeable(n: int, rho: float, df: int, rng: np.random.Generator) -> np.ndarray:
    """多元 t 抽样：正态抽样除以 √(w/df)，w~χ²_df，整条向量共用一个 w."""
    if df < 1:
        raise ValueError(f"自由度须 ≥ 1: df={df}")
    z = sample_mvn_exchangeable(n, rho, rng)
    w = rng.chisquare(df)
    return z / math.sqrt(w / df)
