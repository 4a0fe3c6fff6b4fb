"""
队列数据模块 - 观测三元组/受试者记录的数据模型以及全部预处理步骤
时间序列缺失值保持缺失,从不插补;只有静态特征会被插补
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sklearn.experimental import enable_iterative_imputer  # noqa: F401
from sklearn.impute import IterativeImputer
from sklearn.linear_model import LinearRegression

from core.config import Config
from core.errors import CohortFormatError, ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


class ObservationTriplet(NamedTuple):
    """一次测量 (时间, 特征索引, 数值)"""
    time: float      # 距 episode 开始的小时数
    feature: int     # 特征在队列词表中的索引
    value: float     # 原始单位或标准化后的 z 值


@dataclass(frozen=True)
class StaticColumn:
    """静态列描述: 数值型或类别型(附类别列表)"""
    name: str
    kind: str = "numeric"
    categories: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ConfigError(f"静态列 {self.name} 的类型未知: {self.kind}")
        if self.kind == "categorical" and not self.categories:
            raise ConfigError(f"类别列 {self.name} 缺少类别列表")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1

    def expanded_names(self) -> List[str]:
        if self.kind == "categorical":
            return [f"{self.name}={c}" for c in self.categories]
        return [self.name]


@dataclass
class EpisodeRecord:
    """一个受试者: 静态向量 + 三元组列表 + 可选元数据"""
    episode_id: str
    static_vector: np.ndarray
    triplets: List[ObservationTriplet] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """返回 (times, features, values) 三个数组"""
        if not self.triplets:
            return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0)
        times, features, values = zip(*self.triplets)
        return (np.asarray(times, dtype=np.float64),
                np.asarray(features, dtype=np.int64),
                np.asarray(values, dtype=np.float64))


@dataclass
class CohortDataset:
    """
    一个队列的全部受试者

    feature_vocab 定义 |F| 与索引映射; static_columns 是展开(one-hot)后的列名,
    与每个 static_vector 的宽度一致
    """
    episodes: List[EpisodeRecord]
    feature_vocab: List[str]
    static_schema: List[StaticColumn] = field(default_factory=list)
    static_columns: List[str] = field(default_factory=list)
    normalization_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    static_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    clip_report: Dict[str, int] = field(default_factory=dict)
    impute_reference: Optional[np.ndarray] = field(default=None, compare=False, repr=False)  # 拟合静态插补器用的未插补矩阵

    def __post_init__(self):
        if len(set(self.feature_vocab)) != len(self.feature_vocab):
            raise ConfigError("特征词表中存在重复项")
        widths = {len(e.static_vector) for e in self.episodes}
        if len(widths) > 1:
            raise ConfigError(f"静态向量宽度不一致: {sorted(widths)}")

    @property
    def n_features(self) -> int:
        return len(self.feature_vocab)

    @property
    def static_width(self) -> int:
        return len(self.static_columns)

    @property
    def episode_ids(self) -> List[str]:
        return [e.episode_id for e in self.episodes]

    def feature_index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.feature_vocab)}

    def with_episodes(self, episodes: List[EpisodeRecord]) -> "CohortDataset":
        return replace(self, episodes=list(episodes))

    def subset(self, episode_ids: Iterable[str]) -> "CohortDataset":
        """按 id 顺序取子集"""
        lookup = {e.episode_id: e for e in self.episodes}
        return self.with_episodes([lookup[i] for i in episode_ids])

    def without_metadata(self) -> "CohortDataset":
        """去掉元数据(真实表型、结局)的视图,聚类与分类只能看到这个视图"""
        return self.with_episodes([replace(e, metadata={}) for e in self.episodes])

    def static_matrix(self) -> np.ndarray:
        if not self.episodes:
            return np.zeros((0, self.static_width))
        return np.vstack([e.static_vector for e in self.episodes]).reshape(
            len(self.episodes), self.static_width)


class ClinicalRangeTable(dict):
    """特征 -> (最小允许值, 最大允许值),原始单位"""

    def __init__(self, ranges: Dict[str, Sequence[float]]):
        checked = {}
        for name, bounds in ranges.items():
            low, high = float(bounds[0]), float(bounds[1])
            if not low < high:
                raise ConfigError(f"特征 {name} 的取值范围无效: [{low}, {high}]")
            checked[name] = (low, high)
        super().__init__(checked)


# === 静态特征 ===

def one_hot_static(raw_static_rows: Sequence[Dict[str, str]],
                   static_schema: Sequence[StaticColumn]) -> np.ndarray:
    """
    把原始静态行(字符串)转为数值矩阵

    类别列展开为 c 个 0/1 槽位,缺失时全为0; 数值列原样保留,缺失记为 NaN
    """
    width = sum(col.width for col in static_schema)
    matrix = np.zeros((len(raw_static_rows), width), dtype=np.float64)
    for row_idx, row in enumerate(raw_static_rows):
        offset = 0
        for col in static_schema:
            cell = (row.get(col.name) or "").strip()
            if col.kind == "categorical":
                if cell:
                    if cell not in col.categories:
                        raise ConfigError(
                            f"列 {col.name} 出现未声明的类别 '{cell}', 允许: {list(col.categories)}")
                    matrix[row_idx, offset + col.categories.index(cell)] = 1.0
            else:
                matrix[row_idx, offset] = _parse_static_number(cell, col.name)
            offset += col.width
    return matrix


def _parse_static_number(cell: str, name: str) -> float:
    if not cell:
        return np.nan
    try:
        value = float(cell)
    except ValueError:
        raise ConfigError(f"列 {name} 的数值无法解析: '{cell}'") from None
    if not math.isfinite(value):
        raise ConfigError(f"列 {name} 含有非有限值: '{cell}'")
    return value


def iterative_impute_static(matrix: np.ndarray,
                            sweeps: int = Config.IMPUTE_SWEEPS,
                            reference: Optional[np.ndarray] = None) -> np.ndarray:
    """
    轮换回归插补静态矩阵中的缺失值(NaN)

    均值初始化,之后每一遍用最小二乘把每个不完整列对其余所有列回归,
    覆盖该列的缺失项. 给定 reference (源队列未插补的静态矩阵) 时,
    插补器在 reference 上拟合后作用于 matrix
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    missing = np.isnan(matrix)
    if not missing.any():
        return matrix.copy()

    fit_on = matrix if reference is None else np.asarray(reference, dtype=np.float64)
    if fit_on.ndim != 2 or fit_on.shape[1] != matrix.shape[1]:
        raise ShapeMismatchError(f"插补参考矩阵形状 {fit_on.shape} 与静态宽度 {matrix.shape[1]} 不一致")
    empty = np.where(np.isnan(fit_on).all(axis=0))[0]
    if len(empty):
        raise ConfigError(f"静态列 {empty.tolist()} 没有任何观测值,无法插补")

    if matrix.shape[1] == 1:
        # 没有其他列可回归,退化为均值填充
        filled = matrix.copy()
        filled[missing] = np.nanmean(fit_on)
        return filled

    imputer = IterativeImputer(estimator=LinearRegression(),
                               initial_strategy="mean",
                               max_iter=sweeps,
                               tol=0.0,
                               imputation_order="ascending",
                               random_state=0)
    filled = imputer.fit_transform(matrix) if reference is None else imputer.fit(fit_on).transform(matrix)
    # 观测到的值原样保留
    filled[~missing] = matrix[~missing]
    logger.debug("静态插补完成: 填充 %d 个缺失项", int(missing.sum()))
    return filled


def fit_static_zscore(matrix: np.ndarray, columns: Sequence[str],
                      numeric_columns: Iterable[str]) -> Dict[str, Tuple[float, float]]:
    """只对数值静态列拟合 (mean, std),总体方差"""
    stats = {}
    numeric = set(numeric_columns)
    for j, name in enumerate(columns):
        if name in numeric:
            column = matrix[:, j]
            stats[name] = (float(np.mean(column)), float(np.std(column)))
    return stats


def apply_static_zscore(matrix: np.ndarray, columns: Sequence[str],
                        stats: Dict[str, Tuple[float, float]]) -> np.ndarray:
    result = np.array(matrix, dtype=np.float64, copy=True)
    for j, name in enumerate(columns):
        if name in stats:
            mean, std = stats[name]
            result[:, j] = 0.0 if std < Config.STD_EPSILON else (result[:, j] - mean) / std
    return result


# === 时间序列 ===

def clip_outliers(cohort: CohortDataset, ranges: ClinicalRangeTable) -> CohortDataset:
    """
    剔除取值超出临床范围的三元组(闭区间,边界值保留)

    只删除,不修改保留下来的值; 每个特征被剔除的数量记在 clip_report 中
    """
    observed = {cohort.feature_vocab[t.feature] for e in cohort.episodes for t in e.triplets}
    missing = sorted(observed - set(ranges))
    if missing:
        raise ConfigError(f"以下特征没有取值范围: {missing}")

    bounds = [ranges.get(name) for name in cohort.feature_vocab]
    removed = defaultdict(int)
    episodes = []
    for episode in cohort.episodes:
        kept = []
        for triplet in episode.triplets:
            low, high = bounds[triplet.feature]
            if low <= triplet.value <= high:
                kept.append(triplet)
            else:
                removed[cohort.feature_vocab[triplet.feature]] += 1
        episodes.append(replace(episode, triplets=kept))

    report = {name: removed.get(name, 0) for name in cohort.feature_vocab}
    logger.info("离群值剔除: 共 %d 个三元组", sum(report.values()))
    return replace(cohort, episodes=episodes, clip_report=report)


def align_episode_start(episode: EpisodeRecord) -> EpisodeRecord:
    """把最早的观测时间平移到0"""
    if not episode.triplets:
        return episode
    start = min(t.time for t in episode.triplets)
    if start == 0:
        return episode
    shifted = [t._replace(time=t.time - start) for t in episode.triplets]
    return replace(episode, triplets=shifted)


def bin_hourly(episode: EpisodeRecord, horizon: int = Config.HORIZON_HOURS) -> EpisodeRecord:
    """
    按小时分箱求均值

    每个特征在 [k, k+1) 内有观测时输出一个三元组 (k + 0.5, 特征, 均值);
    时间 ≥ horizon 的观测丢弃; 没有观测的小时不输出任何东西
    """
    sums: Dict[Tuple[int, int], float] = defaultdict(float)
    counts: Dict[Tuple[int, int], int] = defaultdict(int)
    for triplet in episode.triplets:
        if triplet.time >= horizon:
            continue
        key = (triplet.feature, int(math.floor(triplet.time)))
        sums[key] += triplet.value
        counts[key] += 1

    binned = [ObservationTriplet(hour + 0.5, feature, sums[(feature, hour)] / counts[(feature, hour)])
              for feature, hour in sorted(sums, key=lambda k: (k[1], k[0]))]
    return replace(episode, triplets=binned)


def fit_zscore(cohort: CohortDataset) -> Dict[str, Tuple[float, float]]:
    """按特征拟合 (mean, std),总体(1/n)方差; 没有观测的特征不出现在结果中"""
    values: Dict[int, List[float]] = defaultdict(list)
    for episode in cohort.episodes:
        for triplet in episode.triplets:
            values[triplet.feature].append(triplet.value)
    stats = {}
    for feature, observed in sorted(values.items()):
        array = np.asarray(observed, dtype=np.float64)
        stats[cohort.feature_vocab[feature]] = (float(array.mean()), float(array.std()))
    return stats


def apply_zscore(cohort: CohortDataset, stats: Dict[str, Tuple[float, float]]) -> CohortDataset:
    """
    用给定统计量标准化三元组数值; 可作用于拟合队列或另一个队列

    std < 1e-12 的特征全部映射为0
    """
    present = {cohort.feature_vocab[t.feature] for e in cohort.episodes for t in e.triplets}
    unknown = sorted(present - set(stats))
    if unknown:
        raise ConfigError(f"以下特征在拟合队列中没有观测,无法标准化: {unknown}")

    table = [stats.get(name) for name in cohort.feature_vocab]
    episodes = []
    for episode in cohort.episodes:
        normalized = []
        for triplet in episode.triplets:
            mean, std = table[triplet.feature]
            z = 0.0 if std < Config.STD_EPSILON else (triplet.value - mean) / std
            normalized.append(triplet._replace(value=z))
        episodes.append(replace(episode, triplets=normalized))
    return replace(cohort, episodes=episodes, normalization_stats=dict(stats))


def inverse_zscore(value: float, stats: Tuple[float, float]) -> float:
    mean, std = stats
    return value * std + mean


def preprocess_cohort(cohort: CohortDataset,
                      ranges: ClinicalRangeTable,
                      stats: Optional[Dict[str, Tuple[float, float]]] = None,
                      static_stats: Optional[Dict[str, Tuple[float, float]]] = None,
                      impute_reference: Optional[np.ndarray] = None,
                      align_start: bool = True) -> CohortDataset:
    """
    完整预处理: 剔除离群值 → 起点对齐 → 小时分箱 → z-score; 静态: 插补 → z-score

    stats/static_stats/impute_reference 为 None 时在本队列上拟合; 给定时(外部队列)沿用源队列的
    统计量与静态插补器
    """
    clipped = clip_outliers(cohort, ranges)
    episodes = clipped.episodes
    if align_start:
        episodes = [align_episode_start(e) for e in episodes]
    binned = clipped.with_episodes([bin_hourly(e) for e in episodes])

    if stats is None:
        stats = fit_zscore(binned)
    normalized = apply_zscore(binned, stats)

    raw_static = binned.static_matrix()
    if impute_reference is None:
        impute_reference = raw_static
        matrix = iterative_impute_static(raw_static) if binned.episodes else raw_static
    else:
        matrix = iterative_impute_static(raw_static, reference=impute_reference)
    numeric_columns = [c.name for c in cohort.static_schema if c.kind == "numeric"]
    if static_stats is None:
        static_stats = fit_static_zscore(matrix, cohort.static_columns, numeric_columns)
    matrix = apply_static_zscore(matrix, cohort.static_columns, static_stats)

    episodes = [replace(e, static_vector=matrix[i].copy())
                for i, e in enumerate(normalized.episodes)]
    logger.info("✓ 预处理完成: %d 个受试者, %d 个时间序列特征, 静态宽度 %d",
                len(episodes), cohort.n_features, cohort.static_width)
    return replace(normalized, episodes=episodes, static_stats=dict(static_stats),
                   impute_reference=np.array(impute_reference, dtype=np.float64, copy=True))


def drop_empty_episodes(cohort: CohortDataset) -> CohortDataset:
    """组装训练数据时排除没有任何三元组的受试者"""
    kept = [e for e in cohort.episodes if e.triplets]
    dropped = len(cohort.episodes) - len(kept)
    if dropped:
        logger.warning("排除 %d 个没有时间序列观测的受试者", dropped)
    return cohort.with_episodes(kept)
