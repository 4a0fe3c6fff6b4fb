"""
聚类核心模块 - K-means 与三个内部有效性指标

K-means: k-means++ 初始化 + Lloyd 迭代, 多次重启取惯性最小者
指标: 轮廓系数 / Calinski-Harabasz / Davies-Bouldin, 均基于欧氏距离
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from sklearn.metrics import calinski_harabasz_score, davies_bouldin_score
from sklearn.metrics import silhouette_score as _sklearn_silhouette

from core.config import Config
from core.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    """质心矩阵 C (k, p)、每个受试者的簇标签、总簇内平方距离"""
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)


@dataclass
class ValidityScores:
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float

    def to_dict(self) -> Dict[str, float]:
        return {"SS": self.silhouette, "CHS": self.calinski_harabasz, "DBS": self.davies_bouldin}


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) 欧氏距离平方"""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkp,nkp->nk", diff, diff)


def _check_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeMismatchError(f"样本矩阵应为二维, 实际形状 {points.shape}")
    if not np.isfinite(points).all():
        raise ConfigError("样本中含有非有限值")
    return points


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ 初始化: 按到最近已选质心距离平方的比例抽样"""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            index = rng.choice(n, p=closest / total)
        else:
            # 所有点都与已选质心重合
            index = rng.integers(n)
        centroids[i] = points[index]
        closest = np.minimum(closest, squared_distances(points, centroids[i:i + 1])[:, 0])
    return centroids


def _repair_empty(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray,
                  distances: np.ndarray) -> None:
    """空簇修复: 从成员数大于1的簇中把离自身质心最远的点划给空簇(原地修改)"""
    k = centroids.shape[0]
    for cluster in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[cluster] > 0:
            continue
        own = distances[np.arange(len(labels)), labels].copy()
        own[counts[labels] <= 1] = -np.inf
        donor = int(np.argmax(own))
        labels[donor] = cluster
        centroids[cluster] = points[donor]
        distances[donor] = squared_distances(points[donor:donor + 1], centroids)[0]
        logger.debug("空簇 %d 修复: 取点 %d", cluster, donor)


def _update_centroids(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    return sums / counts[:, None]


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> ClusterModel:
    k = centroids.shape[0]
    labels = None
    previous = np.inf
    for iteration in range(max_iter):
        distances = squared_distances(points, centroids)
        new_labels = np.argmin(distances, axis=1)       # 并列时取最小簇号
        inertia = float(distances[np.arange(len(points)), new_labels].sum())
        assert inertia <= previous + 1e-9 * max(1.0, abs(previous)), \
            f"K-means 惯性在第 {iteration} 轮上升: {previous} → {inertia}"
        previous = inertia
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        _repair_empty(points, labels, centroids, distances)
        centroids = _update_centroids(points, labels, k)

    distances = squared_distances(points, centroids)
    labels = np.argmin(distances, axis=1)
    if np.bincount(labels, minlength=k).min() == 0:
        _repair_empty(points, labels, centroids, distances)
        centroids = _update_centroids(points, labels, k)
        distances = squared_distances(points, centroids)
    inertia = float(distances[np.arange(len(points)), labels].sum())
    return ClusterModel(centroids=centroids, labels=labels.astype(np.int64), inertia=inertia)


def kmeans(points, k: int, seed: int,
           restarts: int = Config.KMEANS_RESTARTS,
           max_iter: int = Config.KMEANS_MAX_ITER) -> ClusterModel:
    """
    K-means 聚类

    参数:
        points: (n, p) 样本
        k: 簇数
        seed: 随机种子, 第 r 次重启使用子流 (seed, r)
        restarts: 重启次数, 取惯性最小者(并列取最早的重启)
        max_iter: 每次重启的 Lloyd 迭代上限

    返回:
        ClusterModel
    """
    points = _check_points(points)
    n = points.shape[0]
    if k < 1:
        raise ConfigError(f"簇数必须 ≥ 1, 当前为 {k}")
    if n < k:
        raise ConfigError(f"样本数 {n} 少于簇数 {k}")

    best: Optional[ClusterModel] = None
    for restart in range(max(1, restarts)):
        rng = np.random.default_rng([seed, restart])
        model = _lloyd(points, _kmeans_plus_plus(points, k, rng), max_iter)
        if best is None or model.inertia < best.inertia:
            best = model
    logger.debug("K-means 完成: n=%d, k=%d, inertia=%.6g", n, k, best.inertia)
    return best


def _check_labels(points: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (points.shape[0],):
        raise ShapeMismatchError(f"标签数 {labels.shape} 与样本数 {points.shape[0]} 不一致")
    return labels


def silhouette_score(points, labels) -> float:
    """平均轮廓系数; 单点簇的贡献为0"""
    points = _check_points(points)
    labels = _check_labels(points, labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ConfigError("轮廓系数至少需要2个簇")
    if n_labels == len(points):
        return 0.0
    return float(_sklearn_silhouette(points, labels, metric="euclidean"))


def within_scatter(points: np.ndarray, labels: np.ndarray) -> float:
    """trace(W): 各点到所属簇均值的平方距离之和"""
    total = 0.0
    for cluster in np.unique(labels):
        members = points[labels == cluster]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def calinski_harabasz(points, labels) -> float:
    """
    [trace(B)/(k−1)] / [trace(W)/(n−k)]

    trace(W) < 1e-30 时返回哨兵值 1e12, 使扫描表始终完整
    """
    points = _check_points(points)
    labels = _check_labels(points, labels)
    n, k = len(points), len(np.unique(labels))
    if k < 2:
        raise ConfigError("Calinski-Harabasz 指数至少需要2个簇")
    if k >= n:
        raise ConfigError(f"Calinski-Harabasz 指数要求簇数 {k} 小于样本数 {n}")
    if within_scatter(points, labels) < Config.CH_WITHIN_EPSILON:
        return Config.CH_SENTINEL
    return float(calinski_harabasz_score(points, labels))


def davies_bouldin(points, labels) -> float:
    """(1/k) Σ_i max_{j≠i} (s_i + s_j) / d_ij; 质心重合时报错"""
    points = _check_points(points)
    labels = _check_labels(points, labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ConfigError("Davies-Bouldin 指数至少需要2个簇")
    centroids = np.vstack([points[labels == c].mean(axis=0) for c in clusters])
    gaps = np.sqrt(squared_distances(centroids, centroids))
    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            if gaps[i, j] == 0.0:
                raise ConfigError(f"簇 {clusters[i]} 与簇 {clusters[j]} 的质心重合")
    return float(davies_bouldin_score(points, labels))


def validity_scores(points, labels) -> ValidityScores:
    return ValidityScores(silhouette=silhouette_score(points, labels),
                          calinski_harabasz=calinski_harabasz(points, labels),
                          davies_bouldin=davies_bouldin(points, labels))
