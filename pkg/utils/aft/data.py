"""聚类右删失生存数据.

领域类型、校验与 CSV 读写。展平顺序固定为“按簇优先、簇内保持原顺序”，
所有下游模块的按观测数组 (长度 M) 都与该顺序对齐。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import Field
from pydantic.dataclasses import dataclass as pydantic_dataclass

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """数据不合法."""

    def __init__(
        self,
        message: str,
        *,
        cluster: int | None = None,
        member: int | None = None,
        row: int | None = None,
        column: str | None = None,
    ) -> None:
        super().__init__(message)
        self.cluster = cluster
        self.member = member
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Observation:
    """单个观测 (log T̃, Δ, X)."""

    log_time: float
    delta: int
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class Parameters:
    """回归系数 β."""

    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise ValueError(f"β 含非有限值: {beta}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def p(self) -> int:
        return self.beta.size


@dataclass(frozen=True)
class Residuals:
    """残差 e_ik = log T̃_ik − X_ikᵀβ，按展平顺序排列."""

    e: np.ndarray
    beta_used: Parameters


def _event_indicators(values, locate=None) -> np.ndarray:
    """把事件指示转为 int64；非有限或非整数的值直接报错，不做截断."""
    raw = np.asarray(values).reshape(-1)
    if raw.dtype.kind in "iub":
        return raw.astype(np.int64)
    try:
        as_float = raw.astype(float)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"事件指示无法转为数值: {exc}") from exc
    bad = np.flatnonzero(~np.isfinite(as_float) | (as_float != np.round(as_float)))
    if bad.size:
        flat = int(bad[0])
        if locate is None:
            raise DatasetError(f"事件指示必须为整数 0/1: 第 {flat + 1} 个观测，值 {raw[flat]!r}")
        i, k = locate(flat)
        raise DatasetError(f"事件指示必须为整数 0/1: (i={i}, k={k})，值 {raw[flat]!r}", cluster=i, member=k)
    return as_float.astype(np.int64)


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """
    聚类数据集

    以展平数组为主存储；`clusters` 按需还原为 Observation 列表。
    构造本身不做完整校验，请经 `validate_dataset` 后再使用。
    """

    log_time: np.ndarray
    delta: np.ndarray
    covariates: np.ndarray
    cluster_index: np.ndarray
    cluster_ids: tuple[str, ...]
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        for name in ("log_time", "delta", "covariates", "cluster_index"):
            getattr(self, name).setflags(write=False)
        if not self.covariate_names:
            names = tuple(f"x{j + 1}" for j in range(self.covariates.shape[1]))
            object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_arrays(
        cls,
        log_time: Sequence[float],
        delta: Sequence[int],
        covariates,
        cluster_index: Sequence[int],
        cluster_ids: Sequence[str] | None = None,
        covariate_names: Sequence[str] | None = None,
    ) -> ClusteredDataset:
        """从展平数组构造；按簇编号稳定排序以保证簇优先的展平顺序."""
        log_time = np.asarray(log_time, dtype=float).reshape(-1)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        cluster_index = np.asarray(cluster_index, dtype=np.int64).reshape(-1)

        def locate(flat: int) -> tuple[int, int]:
            if flat >= cluster_index.size:
                return 0, flat + 1
            i = int(cluster_index[flat])
            return i + 1, int(np.count_nonzero(cluster_index[:flat] == i)) + 1

        delta = _event_indicators(delta, locate)
        m = log_time.size
        if not (delta.size == m and covariates.shape[0] == m and cluster_index.size == m):
            raise DatasetError(
                f"维度不一致: log_time={m}, delta={delta.size}, "
                f"covariates={covariates.shape[0]}, cluster_index={cluster_index.size}"
            )
        n_clusters = int(cluster_index.max()) + 1 if m else 0
        if cluster_ids is None:
            cluster_ids = [str(i + 1) for i in range(n_clusters)]
        order = np.argsort(cluster_index, kind="mergesort")
        return cls(
            log_time=np.ascontiguousarray(log_time[order]),
            delta=np.ascontiguousarray(delta[order]),
            covariates=np.ascontiguousarray(covariates[order]),
            cluster_index=np.ascontiguousarray(cluster_index[order]),
            cluster_ids=tuple(str(c) for c in cluster_ids),
            covariate_names=tuple(covariate_names or ()),
        )

    @classmethod
    def from_clusters(
        cls,
        clusters: Sequence[Sequence[Observation]],
        cluster_ids: Sequence[str] | None = None,
        covariate_names: Sequence[str] | None = None,
    ) -> ClusteredDataset:
        """从嵌套的 Observation 列表构造；协变量维度不一致时立即报错."""
        p = None
        rows, times, deltas, index, members_at = [], [], [], [], []
        for i, members in enumerate(clusters):
            for k, obs in enumerate(members):
                if p is None:
                    p = len(obs.covariates)
                elif len(obs.covariates) != p:
                    raise DatasetError(
                        f"维度不一致: (i={i + 1}, k={k + 1}) 协变量长度 {len(obs.covariates)}，期望 {p}",
                        cluster=i + 1,
                        member=k + 1,
                    )
                rows.append(obs.covariates)
                times.append(obs.log_time)
                deltas.append(obs.delta)
                index.append(i)
                members_at.append((i + 1, k + 1))
        delta = _event_indicators(deltas, lambda flat: members_at[flat])
        n_clusters = len(clusters)
        if cluster_ids is None:
            cluster_ids = [str(i + 1) for i in range(n_clusters)]
        covariates = np.asarray(rows, dtype=float).reshape(len(rows), p or 0)
        return cls(
            log_time=np.asarray(times, dtype=float),
            delta=delta,
            covariates=covariates,
            cluster_index=np.asarray(index, dtype=np.int64),
            cluster_ids=tuple(str(c) for c in cluster_ids),
            covariate_names=tuple(covariate_names or ()),
        )

    @property
    def N(self) -> int:
        return len(self.cluster_ids)

    @property
    def M(self) -> int:
        return int(self.log_time.size)

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.N)

    @cached_property
    def clusters(self) -> list[list[Observation]]:
        out: list[list[Observation]] = [[] for _ in range(self.N)]
        for t, d, x, i in zip(self.log_time, self.delta, self.covariates, self.cluster_index):
            out[i].append(Observation(float(t), int(d), tuple(float(v) for v in x)))
        return out

    def permute_clusters(self, order: Sequence[int]) -> ClusteredDataset:
        """按新的簇顺序重排；order[new] = old."""
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.N)):
            raise ValueError("order 必须是簇编号的一个排列")
        new_of_old = np.empty(self.N, dtype=np.int64)
        new_of_old[order] = np.arange(self.N)
        return ClusteredDataset.from_arrays(
            self.log_time,
            self.delta,
            self.covariates,
            new_of_old[self.cluster_index],
            cluster_ids=[self.cluster_ids[i] for i in order],
            covariate_names=self.covariate_names,
        )

    def shifted(self, constant: float) -> ClusteredDataset:
        """所有 log_time 加常数."""
        return ClusteredDataset.from_arrays(
            self.log_time + constant,
            self.delta,
            self.covariates,
            self.cluster_index,
            cluster_ids=self.cluster_ids,
            covariate_names=self.covariate_names,
        )


def validate_dataset(raw: ClusteredDataset) -> ClusteredDataset:
    """
    校验数据集的全部不变量

    Args:
        raw: 待校验的数据集

    Returns:
        原数据集（全部不变量成立时）

    Raises:
        DatasetError: 维度不一致、非有限值、空簇或无事件，信息中给出 (i, k) 位置（从 1 开始）
    """
    if raw.N < 2:
        raise DatasetError(f"簇数不足: N={raw.N}，至少需要 2 个簇")
    if raw.covariates.shape[0] != raw.M or raw.delta.size != raw.M or raw.cluster_index.size != raw.M:
        raise DatasetError("维度不一致: 展平数组长度不同")
    if raw.M and (raw.cluster_index.min() < 0 or raw.cluster_index.max() >= raw.N):
        raise DatasetError("簇编号越界")
    if np.any(np.diff(raw.cluster_index) < 0):
        raise DatasetError("展平顺序错误: 观测未按簇优先排列")

    sizes = raw.cluster_sizes
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        i = int(empty[0]) + 1
        raise DatasetError(f"空簇: i={i} (id={raw.cluster_ids[i - 1]})", cluster=i)

    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    def locate(flat: int) -> tuple[int, int]:
        i = int(raw.cluster_index[flat])
        return i + 1, flat - int(starts[i]) + 1

    bad = np.flatnonzero(~np.isfinite(raw.log_time))
    if bad.size:
        i, k = locate(int(bad[0]))
        raise DatasetError(f"非有限值: (i={i}, k={k}) 的 log_time", cluster=i, member=k)
    bad = np.flatnonzero(~np.isin(raw.delta, (0, 1)))
    if bad.size:
        i, k = locate(int(bad[0]))
        raise DatasetError(f"事件指示必须为 0/1: (i={i}, k={k})", cluster=i, member=k)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(raw.covariates), axis=1))
    if bad_rows.size:
        i, k = locate(int(bad_rows[0]))
        col = int(np.flatnonzero(~np.isfinite(raw.covariates[bad_rows[0]]))[0])
        raise DatasetError(
            f"非有限值: (i={i}, k={k}) 的协变量 {raw.covariate_names[col]}",
            cluster=i,
            member=k,
            column=raw.covariate_names[col],
        )
    if not np.any(raw.delta == 1):
        raise DatasetError("zero events: 没有任何事件 (delta 全为 0)，估计无意义")
    return raw


def compute_residuals(data: ClusteredDataset, beta: Parameters | np.ndarray) -> Residuals:
    """e_ik = log T̃_ik − X_ikᵀβ."""
    params = beta if isinstance(beta, Parameters) else Parameters(np.asarray(beta, dtype=float))
    if params.p != data.p:
        raise ValueError(f"β 长度 {params.p} 与协变量维度 p={data.p} 不一致")
    return Residuals(e=data.log_time - data.covariates @ params.beta, beta_used=params)


@pydantic_dataclass
class CsvSchema:
    """CSV 列映射."""

    cluster_col: str
    time_col: str
    event_col: str
    covariate_cols: list[str] = Field(min_length=1)
    delimiter: str = ","


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        # 表头占第 1 行
        raise DatasetError(
            f"无法解析的单元格: 第 {row + 2} 行，列 {column}，值 {frame[column].iloc[row]!r}",
            row=row + 2,
            column=column,
        )
    return values.to_numpy(dtype=float)


def read_csv(path: str | Path, schema: CsvSchema) -> ClusteredDataset:
    """
    读取 CSV 并构造已校验的数据集

    时间列为原始尺度，读入时取自然对数；簇编号按首次出现顺序映射为 0..N-1。

    Args:
        path: UTF-8 编码、带表头的 CSV 文件
        schema: 列映射

    Returns:
        通过 validate_dataset 的数据集
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"文件不存在: {path}")
    frame = pd.read_csv(
        path,
        sep=schema.delimiter,
        dtype=str,
        keep_default_na=False,
        encoding="utf-8",
    )
    frame.columns = [c.strip() for c in frame.columns]
    for column in [schema.cluster_col, schema.time_col, schema.event_col, *schema.covariate_cols]:
        if column not in frame.columns:
            raise DatasetError(f"缺少列: {column}", column=column)

    times = _numeric_column(frame, schema.time_col)
    nonpositive = np.flatnonzero(times <= 0)
    if nonpositive.size:
        row = int(nonpositive[0]) + 2
        raise DatasetError(
            f"nonpositive time: 第 {row} 行 {schema.time_col}={times[nonpositive[0]]}，无法取对数",
            row=row,
            column=schema.time_col,
        )
    events = _numeric_column(frame, schema.event_col)
    not_binary = np.flatnonzero(~np.isin(events, (0.0, 1.0)))
    if not_binary.size:
        row = int(not_binary[0]) + 2
        raise DatasetError(
            f"无法解析的单元格: 第 {row} 行，列 {schema.event_col} 必须为 0/1",
            row=row,
            column=schema.event_col,
        )
    covariates = np.column_stack([_numeric_column(frame, c) for c in schema.covariate_cols])

    codes, uniques = pd.factorize(frame[schema.cluster_col].str.strip(), sort=False)
    dataset = ClusteredDataset.from_arrays(
        np.log(times),
        events.astype(np.int64),
        covariates,
        codes,
        cluster_ids=[str(u) for u in uniques],
        covariate_names=schema.covariate_cols,
    )
    logger.info(f"[data] 读取 {path.name}: N={dataset.N}, M={dataset.M}, p={dataset.p}")
    return validate_dataset(dataset)


def write_csv(data: ClusteredDataset, path: str | Path, schema: CsvSchema) -> str:
    """按 schema 写出 CSV（时间还原为原始尺度），返回文件路径."""
    if len(schema.covariate_cols) != data.p:
        raise ValueError(f"schema 协变量列数 {len(schema.covariate_cols)} 与 p={data.p} 不一致")
    frame = pd.DataFrame(
        {
            schema.cluster_col: [data.cluster_ids[i] for i in data.cluster_index],
            schema.time_col: np.exp(data.log_time),
            schema.event_col: data.delta,
        }
    )
    for j, column in enumerate(schema.covariate_cols):
        frame[column] = data.covariates[:, j]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep=schema.delimiter, index=False, float_format="%.17g", encoding="utf-8")
    return str(path)
