"""命令行入口：fit / simulate / verify.

配置优先级：_conf_schema.json 默认值 < --config JSON 文件 < 环境变量 AFT_GEHAN_OUT < 命令行参数。
退出码：0 成功，1 用法错误，2 数据错误，3 数值失败 (含 verify 未通过)。
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import Field, ValidationError, field_validator
from pydantic.dataclasses import dataclass as pydantic_dataclass

from ..report_utils import ReportManager, WordReportWriter, render_markdown
from .data import CsvSchema, DatasetError, read_csv
from .estimator import EstimatorConfig, NumericalFailure, Variant, fit
from .simulation import ContaminationTiming, emit_tables, full_grid, load_scenarios, quick_grid, run_scenario
from .variance import iterate_fit
from .verify import run_verify
from .weights import WeightScheme, WeightSet, build_weight_set

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ENV_OUT = "AFT_GEHAN_OUT"
SCHEMA_PATH = Path(__file__).resolve().parents[2] / "_conf_schema.json"

VARIANTS = {"gehan": Variant.GEHAN, "weighted": Variant.WEIGHTED, "robust": Variant.WEIGHTED_ROBUST}
SCHEMES = {
    "unit": WeightScheme.UNIT,
    "inv-size": WeightScheme.INVERSE_SIZE,
    "corr": WeightScheme.CORRELATION_ADJUSTED,
}
FORMATS = ("csv", "md", "json", "docx")
COMPARISON_LABELS = {"gehan": "β̂_G", "weighted": "β̂_ω", "robust": "β̂_ωh"}


class UsageError(Exception):
    """命令行或配置文件用法错误."""


def _split_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


@pydantic_dataclass
class CliConfig:
    """合并后的命令行配置."""

    subcommand: Literal["fit", "simulate", "verify"]
    input: str = ""
    cluster_col: str = "patient"
    time_col: str = "Time"
    event_col: str = "death"
    covariates: list[str] = Field(default_factory=list)
    delimiter: str = ","
    variant: Literal["gehan", "weighted", "robust"] = "robust"
    scheme: Literal["unit", "inv-size", "corr"] = "corr"
    robust: bool = True
    alpha: float = Field(default=2.0, gt=0)
    c_quantile: float = Field(default=0.95, gt=0, lt=1)
    drop_degenerate: bool = True
    seed: int = Field(default=20240601, ge=0)
    out: str = "./aft_output"
    threads: int = Field(default=1, ge=1)
    mode: Literal["quick", "full"] = "quick"
    replications: int = Field(default=0, ge=0)
    scenarios: str = ""
    contamination_timing: Literal["after_response", "before_response"] = "after_response"
    formats: list[str] = Field(default_factory=lambda: ["csv", "md", "json"])
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    @field_validator("covariates", "formats", mode="before")
    @classmethod
    def _comma_list(cls, value):
        return _split_list(value)

    @field_validator("formats")
    @classmethod
    def _known_formats(cls, value: list[str]):
        unknown = [f for f in value if f not in FORMATS]
        if unknown:
            raise ValueError(f"未知的输出格式: {', '.join(unknown)}")
        return value

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value


def load_defaults(schema_path: Path = SCHEMA_PATH) -> dict:
    """读取配置 schema 中每个键的 default."""
    schema = json.loads(schema_path.read_text(encoding="utf-8"))
    return {key: spec["default"] for key, spec in schema.items()}


def resolve_config(args: argparse.Namespace, environ=None) -> CliConfig:
    """按优先级合并配置并校验."""
    environ = os.environ if environ is None else environ
    merged = load_defaults()
    if args.config:
        path = Path(args.config)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"配置文件无法读取: {path}: {exc}") from exc
        if not isinstance(payload, dict):
            raise UsageError(f"配置文件必须是 JSON 对象: {path}")
        unknown = sorted(set(payload) - set(merged))
        if unknown:
            raise UsageError(f"配置文件含未知键: {', '.join(unknown)}")
        merged.update(payload)
    if environ.get(ENV_OUT):
        merged["out"] = environ[ENV_OUT]
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    try:
        return CliConfig(subcommand=args.subcommand, **merged)
    except ValidationError as exc:
        raise UsageError(f"配置不合法: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aft-gehan", description="聚类右删失数据的加权 Gehan 秩估计")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 配置文件")
    common.add_argument("--out", help=f"输出目录 (默认读环境变量 {ENV_OUT})")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--formats", help="逗号分隔: csv,md,json,docx")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", parents=[common], help="在 CSV 数据上拟合")
    p_fit.add_argument("--input")
    p_fit.add_argument("--cluster-col", dest="cluster_col")
    p_fit.add_argument("--time-col", dest="time_col")
    p_fit.add_argument("--event-col", dest="event_col")
    p_fit.add_argument("--covariates", help="逗号分隔的协变量列名")
    p_fit.add_argument("--delimiter")
    p_fit.add_argument("--variant", choices=sorted(VARIANTS))
    p_fit.add_argument("--scheme", choices=sorted(SCHEMES))
    p_fit.add_argument("--no-robust", dest="robust", action="store_const", const=False)
    p_fit.add_argument("--alpha", type=float)
    p_fit.add_argument("--c-quantile", dest="c_quantile", type=float)
    p_fit.add_argument(
        "--strict-covariates",
        dest="drop_degenerate",
        action="store_const",
        const=False,
        help="MAD 为 0 的协变量列直接报错",
    )

    p_sim = sub.add_parser("simulate", parents=[common], help="运行模拟情景")
    mode = p_sim.add_mutually_exclusive_group()
    mode.add_argument("--quick", dest="mode", action="store_const", const="quick")
    mode.add_argument("--full", dest="mode", action="store_const", const="full")
    p_sim.add_argument("--scenarios", help="情景 JSON 文件")
    p_sim.add_argument("--replications", type=int)
    p_sim.add_argument("--threads", type=int)
    p_sim.add_argument("--contamination-timing", dest="contamination_timing", choices=[t.value for t in ContaminationTiming])

    sub.add_parser("verify", parents=[common], help="运行参照实现与梯度校验")
    return parser


def _comparison(data, fits: dict) -> tuple[pd.DataFrame, dict]:
    """三个估计量并列：每个估计量一行估计值、一行 (SE)."""
    names = list(data.covariate_names)
    rows, summary = [], {}
    for key, (fit_result, result) in fits.items():
        beta = fit_result.beta_hat.beta
        se = result.std_errors
        rows.append({"method": COMPARISON_LABELS[key], **{n: f"{b:.4f}" for n, b in zip(names, beta)}})
        rows.append({"method": "(SE)", **{n: f"({s:.4f})" for n, s in zip(names, se)}})
        summary[key] = {
            "converged": fit_result.converged,
            "coefficients": {n: {"estimate": float(b), "se": float(s)} for n, b, s in zip(names, beta, se)},
        }
    return pd.DataFrame(rows, columns=["method", *names]), summary


def _fit_report(config: CliConfig, data, fits: dict, weights: WeightSet, nonsmooth) -> dict:
    names = list(data.covariate_names)
    fit_result, result = fits[config.variant]
    beta = fit_result.beta_hat.beta
    comparison, comparison_summary = _comparison(data, fits)
    coefficients = pd.DataFrame(
        {
            "coefficient": names,
            "estimate": beta,
            "se": result.std_errors,
            "estimate (SE)": [f"{b:.4f} ({s:.4f})" for b, s in zip(beta, result.std_errors)],
            "nonsmooth": nonsmooth.beta_hat.beta,
        }
    )
    starts = np.concatenate([[0], np.cumsum(data.cluster_sizes)[:-1]])
    member = np.arange(data.M) - starts[data.cluster_index]
    weight_rows = pd.DataFrame(
        {
            "cluster": [data.cluster_ids[i] for i in data.cluster_index],
            "member": member + 1,
            "omega": weights.omega[data.cluster_index],
            "h": weights.h,
        }
    )
    summary = {
        "variant": config.variant,
        "scheme": config.scheme,
        "robust": config.robust,
        "N": data.N,
        "M": data.M,
        "events": int(data.delta.sum()),
        "rho_bar": weights.rho_bar,
        "coefficients": {n: {"estimate": float(b), "se": float(s)} for n, b, s in zip(names, beta, result.std_errors)},
        "nonsmooth": {n: float(b) for n, b in zip(names, nonsmooth.beta_hat.beta)},
        "sigma_hat": result.sigma_hat.tolist(),
        "gamma2": fit_result.gamma.tolist(),
        "converged": fit_result.converged,
        "outer_iterations": fit_result.outer_iterations,
        "newton_iterations": fit_result.iterations,
        "score_norm": fit_result.score_norm,
        "history": fit_result.history,
        "comparison": comparison_summary,
    }
    return {"coefficients": coefficients, "comparison": comparison, "weights": weight_rows, "summary": summary}


def _render_fit_markdown(report: dict, source: str) -> str:
    s = report["summary"]
    lines = [
        "# 拟合报告",
        "",
        f"- 数据: `{source}`  N={s['N']} 簇, M={s['M']} 观测, 事件 {s['events']}",
        f"- 估计量: {s['variant']}  ω 方案: {s['scheme']}  GR 权重: {'是' if s['robust'] else '否'}",
        f"- ρ̄ = {s['rho_bar']:.4f}",
        f"- 收敛: {'是' if s['converged'] else '否'}  外层迭代 {s['outer_iterations']}  Newton 步数 {s['newton_iterations']}",
        "- 截距不可由秩估计识别，不报告",
        "",
        "## 系数",
        "",
        render_markdown(report["coefficients"]),
        "## 估计量比较",
        "",
        "三个估计量共用同一组 ω、h，均为平滑版本并与 Γ 迭代至收敛。",
        "",
        render_markdown(report["comparison"]),
    ]
    return "\n".join(lines)


def cmd_fit(config: CliConfig) -> int:
    """拟合 CSV 数据并写出报告."""
    if not config.input:
        raise UsageError("fit 需要 --input")
    if not config.covariates:
        raise UsageError("fit 需要 --covariates")
    schema = CsvSchema(
        cluster_col=config.cluster_col,
        time_col=config.time_col,
        event_col=config.event_col,
        covariate_cols=config.covariates,
        delimiter=config.delimiter,
    )
    data = read_csv(config.input, schema)
    variant = VARIANTS[config.variant]
    logger.info(f"[fit] 开始拟合 {config.input}，估计量 {config.variant}")

    preliminary = fit(data, EstimatorConfig(variant=Variant.GEHAN, smoothed=False), WeightSet.unit(data))
    weights = build_weight_set(
        data,
        preliminary.beta_hat,
        scheme=SCHEMES[config.scheme],
        alpha=config.alpha,
        c_quantile=config.c_quantile,
        robust=config.robust,
        drop_degenerate=config.drop_degenerate,
    )
    nonsmooth = fit(data, EstimatorConfig(variant=variant, smoothed=False), weights)
    fits = {}
    for key, other in VARIANTS.items():
        fit_result, result = iterate_fit(data, EstimatorConfig(variant=other, smoothed=True), weights)
        if not fit_result.converged:
            logger.warning(f"[fit] {key} 迭代未收敛，结果仅供参考")
        fits[key] = (fit_result, result)

    report = _fit_report(config, data, fits, fits[config.variant][0].weight_set, nonsmooth)
    manager = ReportManager(config.out)
    if manager.exists("fit_report.json"):
        logger.info(f"[fit] 覆盖 {config.out} 中已有的报告")
    markdown = _render_fit_markdown(report, config.input)
    manager.write_text("fit_report.md", markdown)
    manager.write_json("fit_report.json", report["summary"])
    manager.write_frame("coefficients.csv", report["coefficients"])
    manager.write_frame("comparison.csv", report["comparison"])
    manager.write_frame("weights.csv", report["weights"])
    if "docx" in config.formats:
        writer = WordReportWriter("拟合报告")
        writer.add_paragraph(f"数据: {config.input}，估计量: {config.variant}，ρ̄ = {weights.rho_bar:.4f}")
        writer.add_table(report["coefficients"])
        writer.add_section("估计量比较")
        writer.add_table(report["comparison"])
        writer.save(Path(config.out) / "fit_report.docx")
    print(markdown)
    print("输出文件: " + ", ".join(manager.list_files()))
    logger.info(f"[fit] 报告已写出到 {config.out}")
    return EXIT_OK


def cmd_simulate(config: CliConfig) -> int:
    """运行模拟情景并写出表格."""
    replications = config.replications or None
    if config.scenarios:
        try:
            scenarios = load_scenarios(config.scenarios, seed=config.seed, replications=replications)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        grid = quick_grid if config.mode == "quick" else full_grid
        scenarios = grid(config.seed) if replications is None else grid(config.seed, replications)
    if config.contamination_timing != "after_response":
        timing = ContaminationTiming(config.contamination_timing)
        scenarios = [_with_timing(s, timing) for s in scenarios]
    logger.info(f"[simulate] 共 {len(scenarios)} 个情景，模式 {config.mode}")

    results = [run_scenario(s, threads=config.threads, progress=True) for s in scenarios]
    formats = [f for f in config.formats if f != "json"]
    emit_tables(results, formats=formats, out_dir=config.out)
    for r in results:
        flag = "  [失败率超过 5%]" if r.flagged else ""
        print(f"{r.scenario.label}: 成功 {r.completed}/{r.scenario.replications}，删失率 {r.censoring_rate:.3f}{flag}")
    return EXIT_OK


def _with_timing(scenario, timing: ContaminationTiming):
    return replace(scenario, contamination_timing=timing)


def cmd_verify(config: CliConfig) -> int:
    """运行校验账本，任一项失败返回 3."""
    ledger = run_verify(seed=config.seed)
    text = ledger.render()
    ReportManager(config.out).write_text("verify_ledger.txt", text)
    print(text, end="")
    return EXIT_OK if ledger.passed else EXIT_NUMERIC


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = resolve_config(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"用法错误: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, config.log_level),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        force=True,
    )
    try:
        return COMMANDS[config.subcommand](config)
    except UsageError as exc:
        print(f"用法错误: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        logger.error(f"[cli] 数据错误: {exc}")
        print(f"数据错误: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        logger.error(f"[cli] 数值失败: {exc}")
        print(f"数值失败: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
