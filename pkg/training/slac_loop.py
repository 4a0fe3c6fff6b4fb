"""
伪标签迭代模块

交替执行: 表征 → K-means 伪标签 → 用伪标签联合训练分类头与编码器
迭代只接触去掉元数据的队列视图
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from sklearn.metrics import adjusted_rand_score
from sklearn.model_selection import train_test_split

from core.clustering import ClusterModel, ValidityScores, kmeans, validity_scores
from core.cohort import CohortDataset, drop_empty_episodes
from core.config import Config, ModelConfig, derive_seed
from core.errors import ConfigError, IterationError, ShapeMismatchError, SlacError
from training.neural_network import SlacTimeNet, episode_arrays, represent_episodes
from training.self_supervision import pretrain
from training.trainer import (NetworkTrainer, TrainingHistory, classify_batch_loss,
                              predict_labels, split_indices)

logger = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    iteration: int
    agreement: Optional[float]          # 与上一次迭代伪标签的 ARI, 第一次为 None
    val_loss: float
    scores: Optional[ValidityScores]

    def to_row(self) -> list:
        scores = self.scores.to_dict() if self.scores else {}
        return [self.iteration, self.agreement, self.val_loss,
                scores.get("SS"), scores.get("CHS"), scores.get("DBS")]


ITERATION_COLUMNS = ["iteration", "agreement", "val_loss", "SS", "CHS", "DBS"]


@dataclass
class SlacRunResult:
    """
    一次完整迭代的结果

    episode_ids 与 labels 一一对应 (已排除没有三元组的受试者)
    """
    episode_ids: List[str]
    labels: np.ndarray
    net: SlacTimeNet
    config: ModelConfig
    cluster_model: ClusterModel
    representations: np.ndarray
    scores: Optional[ValidityScores]
    iterations: List[IterationRecord] = field(default_factory=list)

    @property
    def stopped_early(self) -> bool:
        return len(self.iterations) < self.config.iterations


def safe_validity_scores(points: np.ndarray, labels: np.ndarray) -> Optional[ValidityScores]:
    """退化聚类(例如质心重合)时记录警告并返回 None"""
    try:
        return validity_scores(points, labels)
    except ConfigError as exc:
        logger.warning("无法计算聚类指标: %s", exc)
        return None


def extract_pseudo_labels(cohort: CohortDataset, net: SlacTimeNet, k: int, seed: int,
                          config: Optional[ModelConfig] = None
                          ) -> Tuple[np.ndarray, ClusterModel, np.ndarray]:
    """
    对每个受试者求表征并做 K-means

    返回:
        (伪标签, 聚类模型, 表征矩阵)
    """
    if k < 2:
        raise ConfigError(f"K 必须 ≥ 2, 当前为 {k}")
    config = config or net.config
    representations = represent_episodes(net, cohort.episodes, batch_size=config.batch_size)
    model = kmeans(representations, k, seed,
                   restarts=config.kmeans_restarts, max_iter=config.kmeans_max_iter)
    return model.labels, model, representations


def stratified_split(labels: np.ndarray, seed: int,
                     fraction: float = Config.VALIDATION_FRACTION) -> Tuple[np.ndarray, np.ndarray]:
    """按当前伪标签分层的 80:20 切分; 某类只有1个成员时退回普通切分"""
    indices = np.arange(len(labels))
    counts = np.bincount(labels)
    present = counts[counts > 0]
    n_val = max(1, int(round(fraction * len(labels))))
    if present.min() >= 2 and len(present) <= n_val <= len(labels) - len(present):
        train, val = train_test_split(indices, test_size=n_val, stratify=labels,
                                      random_state=seed % (2 ** 32))
        return np.sort(train), np.sort(val)
    logger.warning("伪标签中有过小的类, 使用非分层切分")
    return split_indices(len(labels), seed, fraction)


def train_classifier_iteration(cohort: CohortDataset, labels, net: SlacTimeNet,
                               config: ModelConfig, seed: int) -> TrainingHistory:
    """
    用伪标签训练一次分类器(同时更新编码器参数), 原地修改 net

    参数:
        cohort: 去掉元数据的队列
        labels: 每个受试者的伪标签
        net: 上一次迭代的网络(热启动)
        config: 批大小、epoch 上限、耐心
        seed: 切分与洗牌种子

    返回:
        训练历史(含最优验证损失)
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(cohort.episodes):
        raise ShapeMismatchError(f"伪标签数 {len(labels)} 与受试者数 {len(cohort.episodes)} 不一致")
    if len(np.unique(labels)) < 2:
        raise ConfigError("伪标签全部相同, 聚类没有提供可学习的信号")
    if labels.max() >= net.classifier.out_features:
        raise ShapeMismatchError(f"伪标签 {labels.max()} 超出分类头的类别数 {net.classifier.out_features}")

    samples = [(episode_arrays(e), int(y)) for e, y in zip(cohort.episodes, labels)]
    train_idx, val_idx = stratified_split(labels, seed)
    train = [samples[i] for i in train_idx]
    validation = [samples[i] for i in val_idx]

    trainer = NetworkTrainer(net, config)
    return trainer.fit(train, validation, classify_batch_loss,
                       max_epochs=config.classifier_epochs,
                       patience=config.patience,
                       seed=seed,
                       label="classifier")


def classifier_accuracy(net: SlacTimeNet, cohort: CohortDataset, labels) -> float:
    predicted = predict_labels(net, [episode_arrays(e) for e in cohort.episodes])
    return float(np.mean(predicted == np.asarray(labels)))


def prepare_network(net: SlacTimeNet, config: ModelConfig) -> SlacTimeNet:
    """复制预训练网络, 按当前配置重建分类头(预训练与 K 无关, 可在多个 K 之间共享)"""
    if net.config.architecture() != config.architecture():
        raise ShapeMismatchError(
            f"预训练网络结构 {net.config.architecture()} 与配置 {config.architecture()} 不一致")
    net = copy.deepcopy(net)
    net.config = config
    net.reset_classifier(config.n_clusters, config.seed)
    return net


def run_slac(cohort: CohortDataset, config: ModelConfig,
             pretrained: Optional[SlacTimeNet] = None) -> SlacRunResult:
    """
    伪标签提取与分类器训练交替进行

    参数:
        cohort: 已预处理的队列(函数内部会去掉元数据)
        config: 模型配置, iterations 为迭代上限
        pretrained: 预训练网络; 为 None 时先预训练

    返回:
        SlacRunResult
    """
    view = drop_empty_episodes(cohort).without_metadata()
    if pretrained is None:
        pretrained, _ = pretrain(view, config)
    net = prepare_network(pretrained, config)
    k = config.n_clusters

    records: List[IterationRecord] = []
    previous = None
    streak = 0
    logger.info("开始伪标签迭代: K=%d, 迭代上限 %d, 受试者 %d 个", k, config.iterations, len(view.episodes))

    for iteration in range(1, config.iterations + 1):
        try:
            labels, _, representations = extract_pseudo_labels(view, net, k, config.seed, config)
            agreement = None if previous is None else float(adjusted_rand_score(previous, labels))
            scores = safe_validity_scores(representations, labels)
            history = train_classifier_iteration(view, labels, net, config,
                                                 seed=derive_seed(config.seed, "iteration", iteration))
        except SlacError as exc:
            raise IterationError(iteration, exc) from exc

        records.append(IterationRecord(iteration, agreement, history.best_val_loss, scores))
        logger.info("迭代 %d/%d: ARI(上一轮)=%s, 验证损失=%.6f", iteration, config.iterations,
                    "-" if agreement is None else f"{agreement:.4f}", history.best_val_loss)
        previous = labels

        streak = streak + 1 if agreement is not None and agreement >= Config.AGREEMENT_STOP else 0
        if streak >= Config.AGREEMENT_PATIENCE:
            logger.info("伪标签连续 %d 次稳定, 提前结束", streak)
            break

    labels, model, representations = extract_pseudo_labels(view, net, k, config.seed, config)
    scores = safe_validity_scores(representations, labels)
    logger.info("✓ 伪标签迭代完成: 簇大小 %s", np.bincount(labels, minlength=k).tolist())
    return SlacRunResult(episode_ids=view.episode_ids, labels=labels, net=net, config=config,
                         cluster_model=model, representations=representations,
                         scores=scores, iterations=records)
