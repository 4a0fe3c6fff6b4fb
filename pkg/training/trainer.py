"""神经网络训练器 - 小批量 Adam、早停与最优权重恢复"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from core.config import Config, ModelConfig
from core.errors import NonFiniteError
from core.numeric import AdamStepper, arrays_to_module, module_to_arrays
from training.neural_network import EpisodeArrays, SlacTimeNet, collate

logger = logging.getLogger(__name__)

BatchLoss = Callable[[SlacTimeNet, Sequence], torch.Tensor]


def masked_mse(predicted: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    L = (1/N') Σ_k Σ_j m_j^k (z̃_j^k − z_j^k)²

    归一化因子是批内样本数, 不是被观测的条目数; 掩码为0的条目对损失与梯度都没有贡献
    """
    if predicted.dim() == 1:
        predicted, target, mask = predicted[None], target[None], mask[None]
    squared = mask * (predicted - target) ** 2
    return squared.sum() / predicted.shape[0]


def forecast_batch_loss(net: SlacTimeNet, samples: Sequence) -> torch.Tensor:
    """samples 中每项有 inputs / target / mask 属性 (ForecastInstance)"""
    batch = collate([s.inputs for s in samples])
    target = torch.as_tensor(np.vstack([s.target for s in samples]), dtype=batch.values.dtype)
    mask = torch.as_tensor(np.vstack([s.mask for s in samples]), dtype=batch.values.dtype)
    return masked_mse(net.forecast(batch), target, mask)


def classify_batch_loss(net: SlacTimeNet, samples: Sequence[Tuple[EpisodeArrays, int]]) -> torch.Tensor:
    """交叉熵(softmax 之后取负对数似然, 批内平均)"""
    batch = collate([s[0] for s in samples])
    labels = torch.as_tensor([s[1] for s in samples], dtype=torch.long)
    return F.cross_entropy(net.classify(batch), labels)


@torch.no_grad()
def predict_labels(net: SlacTimeNet, samples: Sequence[EpisodeArrays], batch_size: int = 8) -> np.ndarray:
    net.eval()
    predictions = [net.classify(collate(samples[i:i + batch_size])).argmax(dim=-1).numpy()
                   for i in range(0, len(samples), batch_size)]
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


class EarlyStopping:
    """验证损失连续 patience 个 epoch 没有创新低则停止; 严格小于才算改进"""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch: int, loss: float) -> Tuple[bool, bool]:
        """返回 (是否改进, 是否应当停止)"""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.wait = loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainingHistory:
    """每个 epoch 的 (epoch, train_loss, val_loss); epoch 0 为训练前的评估"""
    rows: List[Tuple[int, float, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = float("inf")

    @property
    def initial_val_loss(self) -> float:
        return self.rows[0][2]

    @property
    def final_val_loss(self) -> float:
        return self.best_val_loss


class NetworkTrainer:
    def __init__(self, neural_net: SlacTimeNet, config: ModelConfig):
        self.neural_net = neural_net
        self.config = config
        self.optimizer = AdamStepper(neural_net.named_parameters(),
                                     learning_rate=config.learning_rate,
                                     beta1=config.beta1, beta2=config.beta2,
                                     epsilon=config.epsilon)

    def train_on_examples(self, examples: Sequence, batch_loss: BatchLoss,
                          rng: np.random.Generator) -> float:
        """在训练样本上训练一个 epoch, 返回批平均损失"""
        self.neural_net.train()
        indices = rng.permutation(len(examples))
        total, count = 0.0, 0
        for i in range(0, len(examples), self.config.batch_size):
            batch = [examples[idx] for idx in indices[i:i + self.config.batch_size]]
            loss = batch_loss(self.neural_net, batch)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"训练损失出现非有限值 (batch {i // self.config.batch_size})")
            loss.backward()
            self.optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        return total / max(count, 1)

    @torch.no_grad()
    def evaluate(self, examples: Sequence, batch_loss: BatchLoss) -> float:
        """按样本数加权的平均损失"""
        batch_size = self.config.batch_size
        self.neural_net.eval()
        total = 0.0
        for i in range(0, len(examples), batch_size):
            batch = examples[i:i + batch_size]
            total += batch_loss(self.neural_net, batch).item() * len(batch)
        loss = total / max(len(examples), 1)
        if not np.isfinite(loss):
            raise NonFiniteError("验证损失出现非有限值")
        return loss

    def fit(self, train: Sequence, validation: Sequence, batch_loss: BatchLoss,
            max_epochs: int, patience: int, seed: int, label: str = "train") -> TrainingHistory:
        """
        小批量训练 + 早停, 结束时恢复验证损失最低的权重

        参数:
            train / validation: 样本列表
            batch_loss: (网络, 样本批) -> 标量损失
            max_epochs: epoch 上限
            patience: 连续多少个 epoch 不改进即停止
            seed: 洗牌种子
        """
        rng = np.random.default_rng(seed)
        history = TrainingHistory()
        history.rows.append((0, self.evaluate(train, batch_loss), self.evaluate(validation, batch_loss)))
        best_weights = module_to_arrays(self.neural_net)
        # 训练前的权重也参与最优比较
        stopper = EarlyStopping(patience)
        stopper.update(0, history.initial_val_loss)

        for epoch in range(1, max_epochs + 1):
            train_loss = self.train_on_examples(train, batch_loss, rng)
            val_loss = self.evaluate(validation, batch_loss)
            history.rows.append((epoch, train_loss, val_loss))
            improved, stop = stopper.update(epoch, val_loss)
            if improved:
                best_weights = module_to_arrays(self.neural_net)
            logger.debug("[%s] Epoch %d/%d: train=%.6f, val=%.6f", label, epoch, max_epochs,
                         train_loss, val_loss)
            if stop:
                logger.debug("[%s] early stop at epoch %d (best epoch %s)", label, epoch,
                             stopper.best_epoch)
                break

        arrays_to_module(self.neural_net, best_weights)
        history.best_epoch = stopper.best_epoch
        history.best_val_loss = stopper.best_loss
        return history


def split_indices(n: int, seed: int, fraction: float = Config.VALIDATION_FRACTION) -> Tuple[np.ndarray, np.ndarray]:
    """确定性洗牌后按比例切分 (训练, 验证), 两边至少各1个"""
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])

