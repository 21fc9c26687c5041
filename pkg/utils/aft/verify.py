"""校验账本：参照实现等价、梯度恒等式、分布函数精度与不变性."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import estimator, oracles, stats_prims, variance
from .data import ClusteredDataset
from .weights import WeightSet

logger = logging.getLogger(__name__)

# 已知精确值 (scipy / 表值)
PHI_REFERENCE = ((0.0, 0.5), (-1.0, 0.15865525393145707), (1.959963984540054, 0.975), (-3.0, 0.0013498980316301035))
CHISQ_REFERENCE = ((0.95, 1, 3.841458820694124), (0.95, 2, 5.991464547107979), (0.95, 6, 12.591587243743977))


@dataclass
class CheckRecord:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerifyLedger:
    records: list[CheckRecord] = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.records.append(CheckRecord(name, bool(passed), detail))
        level = logging.DEBUG if passed else logging.WARNING
        logger.log(level, f"[verify] {'PASS' if passed else 'FAIL'} {name} {detail}")

    @property
    def passed(self) -> bool:
        return bool(self.records) and all(r.passed for r in self.records)

    def render(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}".rstrip() for r in self.records]
        failed = sum(not r.passed for r in self.records)
        lines.append(f"共 {len(self.records)} 项，失败 {failed} 项")
        return "\n".join(lines) + "\n"


def _rel_err(value, reference) -> float:
    value, reference = np.asarray(value, dtype=float), np.asarray(reference, dtype=float)
    scale = max(float(np.max(np.abs(reference))) if reference.size else 0.0, 1e-12)
    return float(np.max(np.abs(value - reference))) / scale if reference.size else 0.0


def _worst(errors: list[float]) -> float:
    return max(errors) if errors else 0.0


def check_oracles(ledger: VerifyLedger, rng: np.random.Generator, datasets: int = 50, rtol: float = 1e-10) -> None:
    """M ≤ 8 的随机数据上，主实现与逐项枚举逐一比较."""
    errs: dict[str, list[float]] = {}

    def note(name: str, value, reference) -> None:
        errs.setdefault(name, []).append(_rel_err(value, reference))

    for _ in range(datasets):
        data = oracles.random_dataset(rng, n_clusters=int(rng.integers(2, 5)), max_size=2, p=2)
        unit = WeightSet.unit(data)
        weights = oracles.random_weights(rng, data)
        beta = rng.normal(size=data.p)
        a = rng.normal(size=(data.p, data.p))
        gamma2 = a @ a.T + 0.5 * np.eye(data.p)

        for method in ("sorted", "pairwise"):
            note(f"S_G ({method})", estimator.score_nonsmooth(data, unit, beta, method), oracles.score_nonsmooth(data, unit, beta))
            note(f"L_G ({method})", estimator.objective_nonsmooth(data, unit, beta, method), oracles.objective_nonsmooth(data, unit, beta))
            note(f"S_ωh ({method})", estimator.score_nonsmooth(data, weights, beta, method), oracles.score_nonsmooth(data, weights, beta))
            note(f"L_ωh ({method})", estimator.objective_nonsmooth(data, weights, beta, method), oracles.objective_nonsmooth(data, weights, beta))
        note("S̃_ωh", estimator.score_smoothed(data, weights, beta, gamma2), oracles.score_smoothed(data, weights, beta, gamma2))
        note("L̃_ωh", estimator.objective_smoothed(data, weights, beta, gamma2), oracles.objective_smoothed(data, weights, beta, gamma2))
        note("D̃_ωh", estimator.jacobian_smoothed(data, weights, beta, gamma2), oracles.jacobian_smoothed(data, weights, beta, gamma2))
        for method in ("sorted", "naive"):
            note(f"ξ̂ ({method})", variance.xi_terms(data, weights, beta, method), oracles.xi_terms(data, weights, beta))
        target = (int(rng.integers(data.N)), 0)
        pivot = (int(rng.integers(data.N)), 0)
        note("z", variance.z_term(data, weights, beta, target, pivot), oracles.z_term(data, weights, beta, target, pivot))
        reference = oracles.v_hat(data, weights, beta)
        values, vectors = np.linalg.eigh((reference + reference.T) / 2)
        note("V̂", variance.v_hat(data, weights, beta), (vectors * np.maximum(values, 0)) @ vectors.T)

    for name, values in errs.items():
        worst = _worst(values)
        ledger.add(f"oracle {name}", worst <= rtol, f"max rel err {worst:.2e} ({len(values)} 组)")


def _central_gradient(func, beta: np.ndarray, step: float) -> np.ndarray:
    out = []
    for c in range(beta.size):
        shift = np.zeros_like(beta)
        shift[c] = step
        out.append((np.asarray(func(beta + shift)) - np.asarray(func(beta - shift))) / (2 * step))
    return np.array(out)


def check_gradients(ledger: VerifyLedger, rng: np.random.Generator, instances: int = 20, rtol: float = 1e-5) -> None:
    """中心差分检验 ∇L̃ = S̃ 与 ∂S̃/∂β = D̃."""
    grad_errs, jac_errs = [], []
    for _ in range(instances):
        data = oracles.random_dataset(rng, n_clusters=int(rng.integers(4, 13)), max_size=5, p=2)
        weights = oracles.random_weights(rng, data)
        beta = rng.normal(size=2)
        gamma2 = np.diag(rng.uniform(0.5, 2.0, size=2))
        step = 1e-6
        grad = _central_gradient(lambda b: estimator.objective_smoothed(data, weights, b, gamma2), beta, step)
        grad_errs.append(_rel_err(grad, estimator.score_smoothed(data, weights, beta, gamma2)))
        # 第 c 行是 ∂S̃/∂β_c，D̃ 对称
        jac = _central_gradient(lambda b: estimator.score_smoothed(data, weights, b, gamma2), beta, step)
        jac_errs.append(_rel_err(jac.T, estimator.jacobian_smoothed(data, weights, beta, gamma2)))
    ledger.add("gradient ∇L̃ = S̃", _worst(grad_errs) <= rtol, f"max rel err {_worst(grad_errs):.2e}")
    ledger.add("gradient ∂S̃/∂β = D̃", _worst(jac_errs) <= rtol, f"max rel err {_worst(jac_errs):.2e}")


def check_distributions(ledger: VerifyLedger) -> None:
    phi_err = max(abs(float(stats_prims.std_normal_cdf(x)) - ref) for x, ref in PHI_REFERENCE)
    ledger.add("Φ accuracy", phi_err <= 1e-14, f"max abs err {phi_err:.2e}")
    phi_sym = max(
        abs(float(stats_prims.std_normal_cdf(x)) + float(stats_prims.std_normal_cdf(-x)) - 1.0)
        for x in np.linspace(-8, 8, 33)
    )
    ledger.add("Φ(x) + Φ(−x) = 1", phi_sym <= 1e-15, f"max abs err {phi_sym:.2e}")
    chi_err = max(abs(stats_prims.chisq_quantile(prob, df) - ref) / ref for prob, df, ref in CHISQ_REFERENCE)
    ledger.add("χ² quantile accuracy", chi_err <= 1e-10, f"max rel err {chi_err:.2e}")
    back = max(
        abs(stats_prims.chisq_cdf(stats_prims.chisq_quantile(prob, df), df) - prob)
        for prob in (0.5, 0.9, 0.95, 0.99)
        for df in (1, 2, 3, 6, 10)
    )
    ledger.add("χ² cdf(quantile(q)) = q", back <= 1e-12, f"max abs err {back:.2e}")


def check_invariants(ledger: VerifyLedger, rng: np.random.Generator) -> None:
    data = oracles.random_dataset(rng, n_clusters=6, max_size=4, p=2)
    weights = oracles.random_weights(rng, data)
    beta = rng.normal(size=2)
    gamma2 = np.eye(2)

    order = rng.permutation(data.N)
    permuted = data.permute_clusters(order)
    moved = WeightSet(omega=weights.omega[order], h=_permute_flat(data, order, weights.h), cluster_index=permuted.cluster_index)
    err = max(
        _rel_err(estimator.score_nonsmooth(permuted, moved, beta), estimator.score_nonsmooth(data, weights, beta)),
        _rel_err(estimator.score_smoothed(permuted, moved, beta, gamma2), estimator.score_smoothed(data, weights, beta, gamma2)),
        _rel_err(variance.v_hat(permuted, moved, beta), variance.v_hat(data, weights, beta)),
    )
    ledger.add("簇重排不变", err <= 1e-12, f"max rel err {err:.2e}")

    shifted = data.shifted(3.0)
    err = _rel_err(estimator.score_nonsmooth(shifted, weights, beta), estimator.score_nonsmooth(data, weights, beta))
    ledger.add("log 时间平移不变 (S)", err <= 1e-12, f"max rel err {err:.2e}")

    ranks = stats_prims.midranks(np.round(rng.normal(size=40), 1))
    ledger.add("midrank 秩和", math.isclose(float(ranks.sum()), 40 * 41 / 2), f"sum={ranks.sum():g}")


def _permute_flat(data: ClusteredDataset, order, values: np.ndarray) -> np.ndarray:
    starts = np.concatenate([[0], np.cumsum(data.cluster_sizes)[:-1]])
    return np.concatenate([values[starts[i] : starts[i] + data.cluster_sizes[i]] for i in order])


def run_verify(seed: int = 20240601, oracle_datasets: int = 50, gradient_instances: int = 20) -> VerifyLedger:
    """
    运行全部校验

    Args:
        seed: 随机数据的种子
        oracle_datasets: 参照实现比较用的随机数据集个数
        gradient_instances: 梯度检验的随机实例个数

    Returns:
        VerifyLedger，ledger.passed 为全部通过
    """
    ledger = VerifyLedger()
    rng = stats_prims.RngStream(seed).generator()
    check_distributions(ledger)
    check_oracles(ledger, rng, datasets=oracle_datasets)
    check_gradients(ledger, rng, instances=gradient_instances)
    check_invariants(ledger, rng)
    logger.info(f"[verify] 完成 {len(ledger.records)} 项检查，{'全部通过' if ledger.passed else '存在失败'}")
    return ledger
