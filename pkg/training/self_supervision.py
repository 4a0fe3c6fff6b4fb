"""
自监督预训练模块
由观测窗口/预测窗口构造预测样本, 用掩码 MSE 预训练编码器
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.cohort import CohortDataset, EpisodeRecord, drop_empty_episodes
from core.config import Config, ModelConfig
from core.errors import ConfigError
from training.neural_network import EpisodeArrays, SlacTimeNet, build_network
from training.trainer import NetworkTrainer, TrainingHistory, forecast_batch_loss, split_indices

logger = logging.getLogger(__name__)


@dataclass
class ForecastInstance:
    """一个预测样本: 观测窗口内的输入三元组 + 预测窗口内的目标与掩码"""
    episode_id: str
    window_end: float
    inputs: EpisodeArrays       # 只含 time < window_end 的三元组
    target: np.ndarray          # (|F|,) 预测窗口内的均值; 掩码为0处为0
    mask: np.ndarray            # (|F|,) 1 = 该特征在预测窗口内有观测


def build_episode_instances(episode: EpisodeRecord, n_features: int,
                            windows=Config.OBSERVATION_WINDOWS,
                            horizon: float = Config.PREDICTION_HOURS) -> List[ForecastInstance]:
    """单个受试者: 观测窗口与预测窗口都至少有一个观测时才构造样本"""
    times, features, values = episode.arrays()
    static = np.asarray(episode.static_vector, dtype=np.float64)
    instances = []
    for end in windows:
        observed = times < end
        if not observed.any():
            continue
        predicted = (times >= end) & (times < end + horizon)
        if not predicted.any():
            continue
        sums = np.bincount(features[predicted], weights=values[predicted], minlength=n_features)
        counts = np.bincount(features[predicted], minlength=n_features)
        mask = (counts > 0).astype(np.float64)
        target = np.divide(sums, counts, out=np.zeros(n_features), where=counts > 0)
        inputs = (static, times[observed], features[observed], values[observed])
        instances.append(ForecastInstance(episode.episode_id, float(end), inputs, target, mask))
    return instances


def build_forecast_instances(cohort: CohortDataset) -> List[ForecastInstance]:
    """对每个受试者 × 每个观测窗口构造预测样本, 数量 N' 可以超过 N"""
    instances = []
    for episode in cohort.episodes:
        instances.extend(build_episode_instances(episode, cohort.n_features))
    logger.info("构造预测样本 %d 个 (受试者 %d 个)", len(instances), len(cohort.episodes))
    return instances


def split_instances(instances: List[ForecastInstance], config: ModelConfig
                    ) -> Tuple[List[ForecastInstance], List[ForecastInstance]]:
    """80:20 切分; split_mode="episode" 时同一受试者的样本只落在一侧"""
    if config.split_mode == "episode":
        episode_ids = sorted({inst.episode_id for inst in instances})
        if len(episode_ids) < 2:
            raise ConfigError("按受试者切分至少需要2个受试者")
        train_idx, _ = split_indices(len(episode_ids), config.seed)
        train_ids = {episode_ids[i] for i in train_idx}
        train = [inst for inst in instances if inst.episode_id in train_ids]
        validation = [inst for inst in instances if inst.episode_id not in train_ids]
        return train, validation
    train_idx, val_idx = split_indices(len(instances), config.seed)
    return [instances[i] for i in train_idx], [instances[i] for i in val_idx]


def pretrain(cohort: CohortDataset, config: ModelConfig) -> Tuple[SlacTimeNet, TrainingHistory]:
    """
    用预测任务预训练编码器

    参数:
        cohort: 已分箱、已标准化的队列
        config: 模型配置(批大小、耐心、epoch 上限、种子)

    返回:
        (验证损失最低时的网络, 损失历史)
    """
    cohort = drop_empty_episodes(cohort)
    instances = build_forecast_instances(cohort)
    if len(instances) < 2:
        raise ConfigError(f"预测样本只有 {len(instances)} 个, 至少需要2个才能做 80:20 切分")

    train, validation = split_instances(instances, config)
    net = build_network(cohort.n_features, cohort.static_width, config)
    trainer = NetworkTrainer(net, config)

    logger.info("开始预训练: 训练样本 %d 个, 验证样本 %d 个, M=%d d=%d h=%d",
                len(train), len(validation), config.n_blocks, config.d_model, config.n_heads)
    history = trainer.fit(train, validation, forecast_batch_loss,
                          max_epochs=config.pretrain_epochs,
                          patience=config.patience,
                          seed=config.seed,
                          label="pretrain")
    logger.info("✓ 预训练完成: 初始验证损失 %.6f → 最优 %.6f (epoch %s)",
                history.initial_val_loss, history.best_val_loss, history.best_epoch)
    return net, history
