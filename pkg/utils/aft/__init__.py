"""聚类右删失数据的加权 Gehan 秩估计包.

提供数据读取、权重构造、(诱导平滑) 估计、夹心协方差与蒙特卡洛模拟。

使用示例:
    from utils.aft import CsvSchema, read_csv, fit_estimators

    schema = CsvSchema(cluster_col="patient", time_col="Time", event_col="death",
                       covariate_cols=["CD4", "drug"])
    data = read_csv("data/hiv_like.csv", schema)
    suite = fit_estimators(data, scheme="correlation_adjusted", drop_degenerate=True)
    print(suite.smoothed.beta_hat.beta, suite.sandwich.std_errors)
"""

from .data import (
    ClusteredDataset,
    CsvSchema,
    DatasetError,
    Observation,
    Parameters,
    Residuals,
    compute_residuals,
    read_csv,
    validate_dataset,
    write_csv,
)
from .estimator import (
    EstimatorConfig,
    FitResult,
    NumericalFailure,
    Variant,
    fit,
    jacobian_smoothed,
    objective_nonsmooth,
    objective_smoothed,
    score_nonsmooth,
    score_smoothed,
)
from .simulation import (
    Contamination,
    ContaminationTiming,
    ErrorLaw,
    ScenarioResult,
    SimulationScenario,
    calibrate_tau,
    emit_tables,
    full_grid,
    generate_dataset,
    load_scenarios,
    quick_grid,
    run_scenario,
)
from .variance import EstimatorSuite, SandwichResult, fit_estimators, iterate_fit, sandwich, v_hat, xi_terms, z_term
from .weights import (
    DegenerateCovariateError,
    WeightScheme,
    WeightSet,
    build_weight_set,
    estimate_rho_bar,
    gr_weights,
    omega_weights,
    robust_scatter,
)

__all__ = [
    # 数据
    "ClusteredDataset",
    "CsvSchema",
    "DatasetError",
    "Observation",
    "Parameters",
    "Residuals",
    "compute_residuals",
    "read_csv",
    "validate_dataset",
    "write_csv",
    # 权重
    "DegenerateCovariateError",
    "WeightScheme",
    "WeightSet",
    "build_weight_set",
    "estimate_rho_bar",
    "gr_weights",
    "omega_weights",
    "robust_scatter",
    # 估计
    "EstimatorConfig",
    "FitResult",
    "NumericalFailure",
    "Variant",
    "fit",
    "jacobian_smoothed",
    "objective_nonsmooth",
    "objective_smoothed",
    "score_nonsmooth",
    "score_smoothed",
    # 方差
    "EstimatorSuite",
    "SandwichResult",
    "fit_estimators",
    "iterate_fit",
    "sandwich",
    "v_hat",
    "xi_terms",
    "z_term",
    # 模拟
    "Contamination",
    "ContaminationTiming",
    "ErrorLaw",
    "ScenarioResult",
    "SimulationScenario",
    "calibrate_tau",
    "emit_tables",
    "full_grid",
    "generate_dataset",
    "load_scenarios",
    "quick_grid",
    "run_scenario",
]

__version__ = "0.1.0"
