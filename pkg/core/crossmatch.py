"""
交叉匹配置换检验 - 比较两组表征的分布

合并两组样本, 在欧氏距离上求最小权完美匹配, 统计量为跨组配对数;
跨组配对越少说明两组分布差异越大
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from core.config import Config, derive_seed
from core.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class CrossMatchResult:
    statistic: int
    null_samples: np.ndarray
    p_value: float
    n_a: int
    n_b: int
    exact: bool
    dropped: bool = False

    def to_dict(self) -> Dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "n_a": self.n_a,
                "n_b": self.n_b, "exact_matching": self.exact, "dropped_one": self.dropped,
                "null_mean": float(np.mean(self.null_samples)) if len(self.null_samples) else None}


def exact_matching(distances: np.ndarray) -> List[Tuple[int, int]]:
    """
    偶数个点的最小权完美匹配(子集动态规划, 精确)

    总是先为编号最小的未匹配点选择配对, 并列时取编号较小的伙伴
    """
    n = distances.shape[0]
    full = (1 << n) - 1

    @lru_cache(maxsize=None)
    def solve(matched: int) -> Tuple[float, Tuple[Tuple[int, int], ...]]:
        if matched == full:
            return 0.0, ()
        first = next(i for i in range(n) if not matched & (1 << i))
        best_cost, best_pairs = np.inf, ()
        for partner in range(first + 1, n):
            if matched & (1 << partner):
                continue
            rest_cost, rest_pairs = solve(matched | (1 << first) | (1 << partner))
            cost = distances[first, partner] + rest_cost
            if cost < best_cost:
                best_cost, best_pairs = cost, ((first, partner),) + rest_pairs
        return best_cost, best_pairs

    return list(solve(0)[1])


def greedy_matching(distances: np.ndarray) -> List[Tuple[int, int]]:
    """近似最小权完美匹配: 按距离从小到大依次配对(并列按编号)"""
    n = distances.shape[0]
    rows, cols = np.triu_indices(n, k=1)
    order = np.lexsort((cols, rows, distances[rows, cols]))
    used = np.zeros(n, dtype=bool)
    pairs = []
    for idx in order:
        i, j = int(rows[idx]), int(cols[idx])
        if used[i] or used[j]:
            continue
        used[i] = used[j] = True
        pairs.append((i, j))
        if len(pairs) * 2 == n:
            break
    return pairs


def min_weight_matching(points: np.ndarray,
                        exact_limit: int = Config.EXACT_MATCHING_LIMIT) -> Tuple[List[Tuple[int, int]], bool]:
    """返回 (配对列表, 是否精确求解)"""
    if len(points) % 2:
        raise ConfigError("完美匹配要求偶数个点")
    distances = cdist(points, points)
    if len(points) <= exact_limit:
        return exact_matching(distances), True
    return greedy_matching(distances), False


def cross_count(pairs: Sequence[Tuple[int, int]], tags: np.ndarray) -> int:
    return int(sum(tags[i] != tags[j] for i, j in pairs))


def crossmatch_test(reps_a, reps_b, n_perm: int = Config.N_PERMUTATIONS, seed: int = 0,
                    exact_limit: int = Config.EXACT_MATCHING_LIMIT,
                    randomize_ties: bool = True) -> CrossMatchResult:
    """
    交叉匹配置换检验

    参数:
        reps_a / reps_b: 两组样本 (n_a, p) / (n_b, p)
        n_perm: 置换次数
        seed: 随机种子
        exact_limit: 合并样本数不超过此值时精确匹配, 否则贪心匹配
        randomize_ties: 是否随机打破与观测值并列的零分布样本

    返回:
        CrossMatchResult; 与观测值并列的零分布样本随机打破:
        p = (#{null < 观测} + U·(1 + #{null = 观测})) / (1 + n_perm), U ~ (0, 1];
        randomize_ties=False 时退回保守的 (1 + #{null ≤ 观测}) / (1 + n_perm)
    """
    a = np.atleast_2d(np.asarray(reps_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(reps_b, dtype=np.float64))
    if len(reps_a) == 0 or len(reps_b) == 0:
        raise ConfigError("交叉匹配检验的两组都必须非空")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"两组样本宽度不一致: {a.shape[1]} vs {b.shape[1]}")

    points = np.vstack([a, b])
    tags = np.concatenate([np.zeros(len(a), dtype=np.int64), np.ones(len(b), dtype=np.int64)])
    # 按坐标排序, 使结果与输入顺序无关
    order = np.lexsort(np.vstack([tags[None, :], points.T[::-1]]))
    points, tags = points[order], tags[order]

    rng = np.random.default_rng(seed)
    dropped = False
    if len(points) % 2:
        # 总数为奇数时两组大小必然不同, 只从较大的一组去点, 两组都保持非空
        larger = 0 if len(a) > len(b) else 1
        drop = int(rng.choice(np.flatnonzero(tags == larger)))
        logger.info("合并样本数为奇数, 从第 %d 组随机去掉第 %d 个点", larger, drop)
        points, tags = np.delete(points, drop, axis=0), np.delete(tags, drop)
        dropped = True
    n_a, n_b = int((tags == 0).sum()), int((tags == 1).sum())

    pairs, exact = min_weight_matching(points, exact_limit)
    observed = cross_count(pairs, tags)
    # 匹配只依赖合并后的点, 置换只改变组标记
    null = np.array([cross_count(pairs, rng.permutation(tags)) for _ in range(n_perm)], dtype=np.int64)
    if randomize_ties:
        below, ties = float((null < observed).sum()), float((null == observed).sum())
        p_value = (below + (1.0 - rng.random()) * (1.0 + ties)) / (1.0 + n_perm)
    else:
        p_value = (1.0 + float((null <= observed).sum())) / (1.0 + n_perm)
    logger.debug("交叉匹配: n_a=%d, n_b=%d, 跨组配对 %d, p=%.4f", n_a, n_b, observed, p_value)
    return CrossMatchResult(statistic=observed, null_samples=null, p_value=p_value,
                            n_a=n_a, n_b=n_b, exact=exact, dropped=dropped)


def cluster_centroids(points: np.ndarray, labels: np.ndarray) -> Tuple[List[int], np.ndarray]:
    clusters = sorted(set(np.asarray(labels).tolist()))
    return clusters, np.vstack([points[labels == c].mean(axis=0) for c in clusters])


def align_clusters(centroids_a: np.ndarray, centroids_b: np.ndarray) -> np.ndarray:
    """
    匈牙利算法对齐两组质心

    返回:
        mapping, B 的第 j 个簇对应 A 的第 mapping[j] 个簇, 总质心距离最小
    """
    if len(centroids_a) != len(centroids_b):
        raise ConfigError(f"两个队列的表型数不一致: {len(centroids_a)} vs {len(centroids_b)}")
    rows, cols = linear_sum_assignment(cdist(centroids_a, centroids_b))
    mapping = np.empty(len(centroids_b), dtype=np.int64)
    mapping[cols] = rows
    return mapping


@dataclass
class PhenotypeComparison:
    per_phenotype: Dict[int, CrossMatchResult]
    mapping: Dict[int, int]                    # B 的簇号 → A 的簇号
    distribution: List[list] = field(default_factory=list)   # [表型, n_A, 比例_A, n_B, 比例_B]

    @property
    def reproduced(self) -> bool:
        return all(r.p_value > Config.SIGNIFICANCE for r in self.per_phenotype.values())

    @property
    def verdict(self) -> str:
        return "reproduced" if self.reproduced else "not reproduced"

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict,
            "mapping": {str(k): v for k, v in self.mapping.items()},
            "phenotypes": {str(k): r.to_dict() for k, r in self.per_phenotype.items()},
            "distribution": [dict(zip(["phenotype", "n_a", "proportion_a", "n_b", "proportion_b"], row))
                             for row in self.distribution],
        }


def compare_phenotype_distributions(labels_a, labels_b, reps_a, reps_b,
                                    n_perm: int = Config.N_PERMUTATIONS,
                                    seed: int = 0) -> PhenotypeComparison:
    """
    按表型比较两个队列的表征分布

    先用质心的匈牙利匹配统一两边的簇号, 再对每个表型做交叉匹配检验;
    所有表型 p > 0.05 时判定为 "reproduced". 判定用不打破并列的保守 p 值,
    结论只由数据和置换决定
    """
    labels_a, labels_b = np.asarray(labels_a), np.asarray(labels_b)
    reps_a, reps_b = np.asarray(reps_a, dtype=np.float64), np.asarray(reps_b, dtype=np.float64)
    if len(labels_a) != len(reps_a) or len(labels_b) != len(reps_b):
        raise ShapeMismatchError("标签数与表征行数不一致")

    clusters_a, centroids_a = cluster_centroids(reps_a, labels_a)
    clusters_b, centroids_b = cluster_centroids(reps_b, labels_b)
    aligned = align_clusters(centroids_a, centroids_b)
    mapping = {clusters_b[j]: clusters_a[aligned[j]] for j in range(len(clusters_b))}
    relabeled_b = np.array([mapping[y] for y in labels_b.tolist()], dtype=np.int64)

    comparison = PhenotypeComparison(per_phenotype={}, mapping=mapping)
    for phenotype in clusters_a:
        members_a = reps_a[labels_a == phenotype]
        members_b = reps_b[relabeled_b == phenotype]
        result = crossmatch_test(members_a, members_b, n_perm=n_perm,
                                 seed=derive_seed(seed, "phenotype", phenotype), randomize_ties=False)
        comparison.per_phenotype[phenotype] = result
        comparison.distribution.append([phenotype, len(members_a), len(members_a) / len(labels_a),
                                        len(members_b), len(members_b) / len(labels_b)])
        logger.info("表型 %d: n_A=%d, n_B=%d, 跨组配对 %d, p=%.4f", phenotype,
                    len(members_a), len(members_b), result.statistic, result.p_value)
    logger.info("✓ 表型分布比较: %s", comparison.verdict)
    return comparison
