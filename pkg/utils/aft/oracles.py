"""逐项枚举的参照实现.

全部以 (i, k) 嵌套下标直接按定义循环求和，不复用主实现的任何向量化或排序技巧，
正态分布函数也独立地由 math.erfc 给出。只用于小数据 (M ≤ 60) 的交叉校验。
"""

from __future__ import annotations

import math

import numpy as np

from .data import ClusteredDataset, validate_dataset
from .weights import WeightSet


def phi_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def phi_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _nested(data: ClusteredDataset, weights: WeightSet, beta):
    """返回 [(簇 i, [(X_ik, e_ik, Δ_ik, ω_i, h_ik), ...]), ...]."""
    beta = np.asarray(beta, dtype=float)
    out = []
    flat = 0
    for i, members in enumerate(data.clusters):
        rows = []
        for obs in members:
            x = np.array(obs.covariates, dtype=float)
            e = obs.log_time - float(sum(x[c] * beta[c] for c in range(beta.size)))
            rows.append((x, e, obs.delta, float(weights.omega[i]), float(weights.h[flat])))
            flat += 1
        out.append((i, rows))
    return out


def _pairs(data, weights, beta):
    nested = _nested(data, weights, beta)
    for _, rows_a in nested:
        for xa, ea, da, oa, ha in rows_a:
            for _, rows_b in nested:
                for xb, eb, db, ob, hb in rows_b:
                    yield (xa, ea, da, oa * ha), (xb, eb, db, ob * hb)


def score_nonsmooth(data, weights, beta) -> np.ndarray:
    total = np.zeros(data.p)
    for (xa, ea, da, wa), (xb, eb, _, wb) in _pairs(data, weights, beta):
        if da == 1 and ea <= eb:
            total += wa * wb * (xa - xb)
    return total / data.N**2


def objective_nonsmooth(data, weights, beta) -> float:
    total = 0.0
    for (_, ea, da, wa), (_, eb, _, wb) in _pairs(data, weights, beta):
        if da == 1 and eb > ea:
            total += wa * wb * (eb - ea)
    return total / data.N**2


def _radius(xa, xb, gamma2) -> float:
    d = xa - xb
    r2 = 0.0
    for a in range(d.size):
        for b in range(d.size):
            r2 += d[a] * gamma2[a][b] * d[b]
    return math.sqrt(max(r2, 0.0))


def score_smoothed(data, weights, beta, gamma2) -> np.ndarray:
    root_n = math.sqrt(data.N)
    total = np.zeros(data.p)
    for (xa, ea, da, wa), (xb, eb, _, wb) in _pairs(data, weights, beta):
        r = _radius(xa, xb, gamma2)
        if da == 1 and r > 0:
            total += wa * wb * (xa - xb) * phi_cdf(root_n * (eb - ea) / r)
    return total / data.N**2


def objective_smoothed(data, weights, beta, gamma2) -> float:
    root_n = math.sqrt(data.N)
    total = 0.0
    for (xa, ea, da, wa), (xb, eb, _, wb) in _pairs(data, weights, beta):
        if da != 1:
            continue
        r = _radius(xa, xb, gamma2)
        if r > 0:
            u = root_n * (eb - ea) / r
            total += wa * wb * ((eb - ea) * phi_cdf(u) + r / root_n * phi_pdf(u))
        else:
            total += wa * wb * max(eb - ea, 0.0)
    return total / data.N**2


def jacobian_smoothed(data, weights, beta, gamma2) -> np.ndarray:
    root_n = math.sqrt(data.N)
    total = np.zeros((data.p, data.p))
    for (xa, ea, da, wa), (xb, eb, _, wb) in _pairs(data, weights, beta):
        r = _radius(xa, xb, gamma2)
        if da == 1 and r > 0:
            d = xa - xb
            total += wa * wb * np.outer(d, d) * phi_pdf(root_n * (eb - ea) / r) * root_n / r
    return total / data.N**2


def z_term(data, weights, beta, target: tuple[int, int], pivot: tuple[int, int]) -> np.ndarray:
    """target、pivot 均为 (簇, 成员) 二元组，从 0 开始."""
    nested = _nested(data, weights, beta)
    x_ik = nested[target[0]][1][target[1]][0]
    e_jf = nested[pivot[0]][1][pivot[1]][1]
    upper = np.zeros(data.p)
    count = 0
    for _, rows in nested:
        for x_rs, e_rs, _, omega_r, h_rs in rows:
            if e_rs >= e_jf:
                upper += omega_r * h_rs * (x_ik - x_rs)
                count += 1
    return upper / count


def xi_terms(data, weights, beta) -> np.ndarray:
    nested = _nested(data, weights, beta)
    n = data.N
    out = []
    for i, rows_i in nested:
        for k, (x_ik, e_ik, d_ik, _, _) in enumerate(rows_i):
            total = np.zeros(data.p)
            for j, rows_j in nested:
                for f, (x_jf, e_jf, d_jf, omega_j, h_jf) in enumerate(rows_j):
                    if e_ik < e_jf:
                        total += omega_j * (d_ik / n) * h_jf * (x_ik - x_jf)
                    else:
                        total -= omega_j * (d_jf / n) * z_term(data, weights, beta, (i, k), (j, f))
            out.append(total)
    return np.array(out)


def v_hat(data, weights, beta) -> np.ndarray:
    """按定义的 Σ_i Σ_k Σ_l 三重求和，不做 PSD 截断."""
    xi = xi_terms(data, weights, beta)
    total = np.zeros((data.p, data.p))
    offset = 0
    for i, members in enumerate(data.clusters):
        size = len(members)
        omega = float(weights.omega[i])
        for k in range(size):
            for l in range(size):
                a, b = offset + k, offset + l
                total += omega**2 * weights.h[a] * weights.h[b] * np.outer(xi[a], xi[b])
        offset += size
    return total / data.N


def random_dataset(
    rng: np.random.Generator,
    n_clusters: int = 3,
    max_size: int = 3,
    p: int = 2,
    censor_prob: float = 0.3,
) -> ClusteredDataset:
    """小规模随机数据集；保证至少一个事件."""
    sizes = rng.integers(1, max_size + 1, size=n_clusters)
    m = int(sizes.sum())
    delta = (rng.random(m) >= censor_prob).astype(np.int64)
    delta[rng.integers(m)] = 1
    return validate_dataset(
        ClusteredDataset.from_arrays(
            rng.normal(size=m),
            delta,
            rng.normal(size=(m, p)),
            np.repeat(np.arange(n_clusters), sizes),
        )
    )


def random_weights(rng: np.random.Generator, data: ClusteredDataset) -> WeightSet:
    return WeightSet(
        omega=rng.uniform(0.2, 1.0, size=data.N),
        h=rng.uniform(0.1, 1.0, size=data.M),
        cluster_index=data.cluster_index,
    )
