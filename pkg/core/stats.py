"""
统计分析模块 - 表型刻画

按簇汇总静态特征、Kruskal-Wallis 检验、逐小时均值与95%置信区间、
结局变量汇总, 以及学到的表征的 PCA 投影
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps
from scipy.special import gammaincc
from sklearn.decomposition import PCA
from sklearn.metrics import adjusted_rand_score

from core.cohort import CohortDataset, inverse_zscore
from core.config import Config
from core.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

Labels = Union[Mapping[str, int], Sequence[int], np.ndarray]


# === 检验 ===

def chi2_upper_tail(x: float, df: int) -> float:
    """卡方分布上尾概率 P(X ≥ x) = Q(df/2, x/2)(正则化上不完全伽马函数)"""
    if df < 1:
        raise ConfigError(f"自由度必须 ≥ 1, 当前为 {df}")
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """
    Kruskal-Wallis H 检验(平均秩 + 并列校正, 卡方近似)

    参数:
        groups: 至少2组, 每组非空, 总样本数 ≥ 3

    返回:
        (H, p); 所有值完全相同时返回 (0.0, 1.0)
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ConfigError("Kruskal-Wallis 检验至少需要2组")
    if any(len(g) == 0 for g in groups):
        raise ConfigError("Kruskal-Wallis 检验的每组都必须非空")
    pooled = np.concatenate(groups)
    if len(pooled) < 3:
        raise ConfigError("Kruskal-Wallis 检验的总样本数至少为3")
    if np.all(pooled == pooled[0]):
        return 0.0, 1.0
    statistic, _ = sps.kruskal(*groups)
    return float(statistic), chi2_upper_tail(float(statistic), len(groups) - 1)


# === 标签与分组 ===

def label_map(cohort: CohortDataset, labels: Labels) -> Dict[str, int]:
    """标签可以是 {episode_id: 簇} 或与 cohort.episodes 对齐的序列"""
    if isinstance(labels, Mapping):
        mapping = {str(k): int(v) for k, v in labels.items()}
    else:
        labels = list(labels)
        if len(labels) != len(cohort.episodes):
            raise ShapeMismatchError(f"标签数 {len(labels)} 与受试者数 {len(cohort.episodes)} 不一致")
        mapping = {e.episode_id: int(y) for e, y in zip(cohort.episodes, labels)}
    uncovered = [e.episode_id for e in cohort.episodes if e.episode_id not in mapping]
    if uncovered:
        raise ConfigError(f"{len(uncovered)} 个受试者没有标签, 例如 {uncovered[:3]}")
    return mapping


def _raw_static(cohort: CohortDataset) -> np.ndarray:
    """静态矩阵还原到原始单位(数值列反标准化, one-hot 列不变)"""
    matrix = cohort.static_matrix().copy()
    for j, name in enumerate(cohort.static_columns):
        if name in cohort.static_stats:
            matrix[:, j] = inverse_zscore(matrix[:, j], cohort.static_stats[name])
    return matrix


def _raw_value(cohort: CohortDataset, feature: int, value: float, raw_units: bool) -> float:
    name = cohort.feature_vocab[feature]
    if raw_units and name in cohort.normalization_stats:
        return inverse_zscore(value, cohort.normalization_stats[name])
    return value


def _mean_sd(values: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    if len(values) == 0:
        return None, None
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return float(np.mean(values)), sd


# === 逐小时均值 ===

@dataclass
class HourlyStat:
    cluster: int
    feature: str
    hour: int
    mean: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    n_obs: int

    def to_row(self) -> list:
        return [self.cluster, self.feature, self.hour, self.mean, self.ci_low, self.ci_high, self.n_obs]


def hourly_mean_ci(cohort: CohortDataset, labels: Labels, feature: str,
                   raw_units: bool = True,
                   horizon: int = Config.HORIZON_HOURS) -> List[HourlyStat]:
    """
    每个 (簇, 小时) 上有观测的受试者的均值 ± 1.96·sd/√n (样本标准差)

    n_obs < 2 时只给均值; 没有观测的小时也输出一行, n_obs = 0
    """
    index = cohort.feature_index()
    if feature not in index:
        raise ConfigError(f"特征 {feature} 不在词表中")
    target = index[feature]
    mapping = label_map(cohort, labels)

    cells: Dict[Tuple[int, int], List[float]] = defaultdict(list)
    for episode in cohort.episodes:
        cluster = mapping[episode.episode_id]
        per_hour: Dict[int, List[float]] = defaultdict(list)
        for triplet in episode.triplets:
            if triplet.feature == target and triplet.time < horizon:
                per_hour[int(math.floor(triplet.time))].append(
                    _raw_value(cohort, target, triplet.value, raw_units))
        # 每个受试者每小时只贡献一个值
        for hour, values in per_hour.items():
            cells[(cluster, hour)].append(float(np.mean(values)))

    rows = []
    for cluster in sorted(set(mapping[e.episode_id] for e in cohort.episodes)):
        for hour in range(horizon):
            values = np.asarray(cells.get((cluster, hour), []))
            n = len(values)
            if n == 0:
                rows.append(HourlyStat(cluster, feature, hour, None, None, None, 0))
                continue
            mean = float(values.mean())
            if n < 2:
                rows.append(HourlyStat(cluster, feature, hour, mean, None, None, n))
                continue
            half = Config.Z_95 * float(values.std(ddof=1)) / math.sqrt(n)
            rows.append(HourlyStat(cluster, feature, hour, mean, mean - half, mean + half, n))
    return rows


# === PCA ===

@dataclass
class PcaResult:
    coordinates: np.ndarray          # (n, n_components)
    explained_variance_ratio: np.ndarray
    components: np.ndarray           # (n_components, p)


def pca_project(representations, n_components: int = 2) -> PcaResult:
    """
    主成分投影; 每个主成分中绝对值最大的载荷取正号

    零方差数据报错
    """
    data = np.asarray(representations, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatchError(f"表征矩阵应为二维, 实际形状 {data.shape}")
    n, p = data.shape
    if n < 2:
        raise ConfigError("PCA 至少需要2个样本")
    if p < n_components:
        raise ConfigError(f"表征宽度 {p} 小于主成分数 {n_components}")
    centered = data - data.mean(axis=0)
    if float((centered ** 2).sum()) <= 0.0:
        raise ConfigError("表征方差为0, 无法做 PCA")

    pca = PCA(n_components=n_components, svd_solver="full")
    coordinates = pca.fit_transform(data)
    components = pca.components_.copy()
    for i in range(n_components):
        pivot = int(np.argmax(np.abs(components[i])))
        if components[i, pivot] < 0:
            components[i] *= -1
            coordinates[:, i] *= -1
    ratio = np.asarray(pca.explained_variance_ratio_, dtype=np.float64)
    return PcaResult(coordinates=coordinates, explained_variance_ratio=ratio, components=components)


# === 表型报告 ===

@dataclass
class PhenotypeReport:
    """
    一组簇标签的完整刻画

    static_rows: (cluster, feature, mean, sd, n); 类别列的 mean 为比例, n 为计数
    tests: feature → (H, p, 是否显著)
    hourly: 每个时间序列特征的逐小时统计
    outcomes: 元数据存在时各簇的结局汇总
    """
    clusters: List[int]
    counts: List[int]
    proportions: List[float]
    static_rows: List[list] = field(default_factory=list)
    tests: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)   # 键为 "static:<列>" 或 "ts:<特征>"
    hourly: List[HourlyStat] = field(default_factory=list)
    outcomes: Dict[str, Dict[str, Dict[str, Optional[float]]]] = field(default_factory=dict)
    planted_ari: Optional[float] = None

    def static_records(self) -> List[list]:
        return self.static_rows

    def temporal_records(self) -> List[list]:
        return [h.to_row() for h in self.hourly]

    def test_records(self) -> List[list]:
        return [key.split(":", 1) + [t["H"], t["p"]] for key, t in self.tests.items()]

    def significant_features(self) -> List[str]:
        return [name for name, t in self.tests.items() if t["significant"]]

    def to_dict(self) -> Dict:
        return {
            "clusters": self.clusters,
            "counts": self.counts,
            "proportions": self.proportions,
            "tests": self.tests,
            "significant": self.significant_features(),
            "outcomes": self.outcomes,
            "planted_ari": self.planted_ari,
        }


def _test_entry(groups: List[np.ndarray]) -> Dict[str, Optional[float]]:
    groups = [g for g in groups if len(g) > 0]
    if len(groups) < 2 or sum(len(g) for g in groups) < 3:
        return {"H": None, "p": None, "significant": False}
    h, p = kruskal_wallis(groups)
    return {"H": h, "p": p, "significant": bool(p < Config.SIGNIFICANCE)}


def _outcome_summary(values: np.ndarray) -> Dict[str, Optional[float]]:
    if len(values) == 0:
        return {"n": 0}
    if np.isin(values, (0.0, 1.0)).all():
        return {"n": int(len(values)), "rate": float(values.mean())}
    mean, sd = _mean_sd(values)
    return {"n": int(len(values)), "mean": mean, "sd": sd, "median": float(np.median(values))}


def summarize_outcomes(cohort: CohortDataset, mapping: Dict[str, int],
                       clusters: Sequence[int]) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """对除 phenotype 以外的数值元数据(死亡标记、ICU 时长等)按簇汇总"""
    keys = sorted({k for e in cohort.episodes for k in e.metadata if k != "phenotype"})
    outcomes = {}
    for key in keys:
        per_cluster = {}
        for cluster in clusters:
            values = []
            for episode in cohort.episodes:
                value = episode.metadata.get(key)
                if mapping[episode.episode_id] == cluster and value is not None:
                    try:
                        values.append(float(value))
                    except (TypeError, ValueError):
                        continue
            per_cluster[str(cluster)] = _outcome_summary(np.asarray(values, dtype=np.float64))
        outcomes[key] = per_cluster
    return outcomes


def characterize(cohort: CohortDataset, labels: Labels, raw_units: bool = True) -> PhenotypeReport:
    """
    组装完整的表型报告(不修改队列)

    时间序列特征在检验前先化为每个受试者在有观测小时上的均值
    """
    mapping = label_map(cohort, labels)
    assigned = np.asarray([mapping[e.episode_id] for e in cohort.episodes], dtype=np.int64)
    clusters = sorted(set(assigned.tolist()))
    counts = [int((assigned == c).sum()) for c in clusters]
    total = max(len(assigned), 1)
    report = PhenotypeReport(clusters=clusters, counts=counts,
                             proportions=[c / total for c in counts])

    # 静态特征
    static = _raw_static(cohort)
    categorical = {name for col in cohort.static_schema if col.kind == "categorical"
                   for name in col.expanded_names()}
    for j, name in enumerate(cohort.static_columns):
        column = static[:, j]
        for cluster in clusters:
            members = column[assigned == cluster]
            if name in categorical:
                hits = int(members.sum())
                report.static_rows.append([cluster, name, hits / max(len(members), 1), None, hits])
            else:
                mean, sd = _mean_sd(members)
                report.static_rows.append([cluster, name, mean, sd, len(members)])
        report.tests[f"static:{name}"] = _test_entry([column[assigned == c] for c in clusters])

    # 时间序列特征: 每个受试者取有观测小时的均值
    for feature, name in enumerate(cohort.feature_vocab):
        groups = defaultdict(list)
        for episode, cluster in zip(cohort.episodes, assigned):
            values = [_raw_value(cohort, feature, t.value, raw_units)
                      for t in episode.triplets if t.feature == feature]
            if values:
                groups[int(cluster)].append(float(np.mean(values)))
        report.tests[f"ts:{name}"] = _test_entry([np.asarray(groups[c]) for c in clusters])
        report.hourly.extend(hourly_mean_ci(cohort, mapping, name, raw_units=raw_units))

    report.outcomes = summarize_outcomes(cohort, mapping, clusters)
    planted = [e.metadata.get("phenotype") for e in cohort.episodes]
    if all(p is not None for p in planted) and planted:
        report.planted_ari = float(adjusted_rand_score([str(p) for p in planted], assigned))

    logger.info("✓ 表型刻画完成: %d 个簇, %d 个特征显著 (p < %.2f)",
                len(clusters), len(report.significant_features()), Config.SIGNIFICANCE)
    return report


# === 队列概要表 ===

def summarize_cohort(cohorts: Mapping[str, CohortDataset]) -> List[list]:
    """
    队列关键特征汇总表: 每行 [变量, 队列1, 队列2, ...]

    数值静态特征为 "mean ± SD", 类别特征为 "n (%)"
    """
    names = list(cohorts)
    rows = [["N"] + [str(len(cohorts[n].episodes)) for n in names]]
    first = cohorts[names[0]]
    categorical = {name for col in first.static_schema if col.kind == "categorical"
                   for name in col.expanded_names()}
    matrices = {n: _raw_static(cohorts[n]) for n in names}
    for j, column in enumerate(first.static_columns):
        row = [column]
        for n in names:
            if column not in cohorts[n].static_columns:
                row.append("")
                continue
            values = matrices[n][:, cohorts[n].static_columns.index(column)]
            if column in categorical:
                hits = int(values.sum())
                row.append(f"{hits} ({100.0 * hits / max(len(values), 1):.1f}%)")
            else:
                mean, sd = _mean_sd(values)
                row.append("" if mean is None else f"{mean:.2f} ± {0.0 if sd is None else sd:.2f}")
        rows.append(row)
    return rows
