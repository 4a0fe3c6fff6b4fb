"""神经网络模型 - 观测三元组编码器 + 预测头 + 分类头"""
import math
import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from core.cohort import EpisodeRecord, ObservationTriplet
from core.config import ModelConfig
from core.errors import EmptyEpisodeError, ShapeMismatchError
from core.numeric import DTYPE, dense_forward, glorot_init_, softmax

# 参数初始化使用 torch 全局随机状态, 多线程扫描时需串行
_INIT_LOCK = threading.Lock()


@dataclass
class EpisodeBatch:
    """一批受试者(补齐到同一长度), mask 为 True 的位置是真实三元组"""
    times: torch.Tensor       # (B, L)
    features: torch.Tensor    # (B, L) long
    values: torch.Tensor      # (B, L)
    mask: torch.Tensor        # (B, L) bool
    static: torch.Tensor      # (B, D)

    def __len__(self):
        return self.static.shape[0]


EpisodeArrays = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # static, times, features, values


def episode_arrays(episode: EpisodeRecord) -> EpisodeArrays:
    times, features, values = episode.arrays()
    return np.asarray(episode.static_vector, dtype=np.float64), times, features, values


def collate(samples: Sequence[EpisodeArrays]) -> EpisodeBatch:
    """把若干 (static, times, features, values) 补齐成一个批次"""
    lengths = [len(s[1]) for s in samples]
    if min(lengths) == 0:
        raise EmptyEpisodeError("批次中有受试者没有任何三元组")
    size, longest = len(samples), max(lengths)
    times = np.zeros((size, longest))
    features = np.zeros((size, longest), dtype=np.int64)
    values = np.zeros((size, longest))
    mask = np.zeros((size, longest), dtype=bool)
    for row, (_, t, f, v) in enumerate(samples):
        n = len(t)
        times[row, :n], features[row, :n], values[row, :n], mask[row, :n] = t, f, v, True
    static = np.vstack([s[0] for s in samples]).reshape(size, -1)
    return EpisodeBatch(times=torch.as_tensor(times, dtype=DTYPE),
                        features=torch.as_tensor(features),
                        values=torch.as_tensor(values, dtype=DTYPE),
                        mask=torch.as_tensor(mask),
                        static=torch.as_tensor(static, dtype=DTYPE))


class ContinuousValueEmbedding(nn.Module):
    """一对多前馈网络: 标量 → dense(⌈√d⌉, tanh) → dense(d)"""

    def __init__(self, d_model: int):
        super().__init__()
        hidden = int(math.ceil(math.sqrt(d_model)))
        self.hidden = nn.Linear(1, hidden)
        self.output = nn.Linear(hidden, d_model)

    def forward(self, scalars: torch.Tensor) -> torch.Tensor:
        x = scalars.unsqueeze(-1)
        return self.output(torch.tanh(self.hidden(x)))


class TransformerBlock(nn.Module):
    """多头自注意力 + 逐位置前馈, 普通残差连接, 不含归一化层与 dropout"""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.ffn_hidden = nn.Linear(d_model, 2 * d_model)
        self.ffn_out = nn.Linear(2 * d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        size, length, _ = x.shape
        return x.view(size, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attended = softmax(scores, dim=-1) @ v                      # (B, h, L, dh)
        attended = attended.transpose(1, 2).reshape(x.shape)
        x = x + self.attn_out(attended)
        x = x + self.ffn_out(torch.tanh(self.ffn_hidden(x)))
        # 补齐位置清零, 避免无意义数值在后续块中累积
        return x * mask.unsqueeze(-1)


class FusionAttention(nn.Module):
    """α_i = softmax_i(u · tanh(W_a c_i + b_a)), e^T = Σ α_i c_i"""

    def __init__(self, d_model: int):
        super().__init__()
        self.project = nn.Linear(d_model, d_model)
        self.score = nn.Parameter(torch.zeros(d_model, dtype=DTYPE))

    def forward(self, contextual: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        scores = torch.tanh(self.project(contextual)) @ self.score   # (B, L)
        weights = softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
        fused = (weights.unsqueeze(-1) * contextual).sum(dim=1)
        return fused, weights


class SlacTimeNet(nn.Module):
    """
    三元组编码器

    e_i = e^f(查表) + e^v(CVE) + e^t(CVE); M 个 transformer 块; 融合注意力得到 e^T;
    静态向量经前馈层得到 e^d; 表征 = [e^d ; e^T] (或仅 e^T)
    预测头 z̃ = W_s[e^d ; e^T] + b_s, 分类头 g_W 为单个仿射层
    """

    def __init__(self, n_features: int, static_width: int, config: ModelConfig):
        super(SlacTimeNet, self).__init__()
        d = config.d_model
        self.config = config
        self.n_features = n_features
        self.static_width = static_width

        # 三元组嵌入
        self.feature_embedding = nn.Embedding(n_features, d)
        self.value_cve = ContinuousValueEmbedding(d)
        self.time_cve = ContinuousValueEmbedding(d)

        # 静态特征嵌入
        self.static_ffn = nn.Linear(static_width, d)

        # 上下文编码与融合
        self.blocks = nn.ModuleList([TransformerBlock(d, config.n_heads)
                                     for _ in range(config.n_blocks)])
        self.fusion = FusionAttention(d)

        # 预测头与分类头
        self.forecast_head = nn.Linear(2 * d, n_features)
        self.classifier = nn.Linear(config.representation_width, config.n_clusters)

    # === 嵌入 ===

    def embed_triplet(self, triplet: ObservationTriplet) -> torch.Tensor:
        """单个三元组的初始嵌入 (d,)"""
        if not 0 <= triplet.feature < self.n_features:
            raise ShapeMismatchError(f"特征索引 {triplet.feature} 超出词表范围 [0, {self.n_features})")
        feature = torch.as_tensor([triplet.feature])
        time = torch.as_tensor([triplet.time], dtype=DTYPE)
        value = torch.as_tensor([triplet.value], dtype=DTYPE)
        return self.embed_triplets(time, feature, value)[0]

    def embed_triplets(self, times: torch.Tensor, features: torch.Tensor,
                       values: torch.Tensor) -> torch.Tensor:
        return self.feature_embedding(features) + self.value_cve(values) + self.time_cve(times)

    def embed_static(self, static: torch.Tensor) -> torch.Tensor:
        """e^d = FFN(d), 输出宽度 d"""
        if static.shape[-1] != self.static_width:
            raise ShapeMismatchError(f"静态向量宽度 {static.shape[-1]} 与模型 {self.static_width} 不一致")
        return dense_forward(static, self.static_ffn.weight, self.static_ffn.bias)

    # === 编码 ===

    def encode_triplets(self, batch: EpisodeBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """返回 (e^T: (B, d), 融合权重: (B, L))"""
        if not bool(batch.mask.any(dim=1).all()):
            raise EmptyEpisodeError("受试者没有任何三元组, 无法编码")
        if int(batch.features.max()) >= self.n_features:
            raise ShapeMismatchError(f"特征索引超出词表范围 [0, {self.n_features})")
        x = self.embed_triplets(batch.times, batch.features, batch.values) * batch.mask.unsqueeze(-1)
        for block in self.blocks:
            x = block(x, batch.mask)
        return self.fusion(x, batch.mask)

    def encode(self, batch: EpisodeBatch) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """返回 (e^d, e^T, 融合权重)"""
        e_t, weights = self.encode_triplets(batch)
        return self.embed_static(batch.static), e_t, weights

    def represent(self, batch: EpisodeBatch) -> torch.Tensor:
        """送入 K-means 与分类器的表征"""
        e_d, e_t, _ = self.encode(batch)
        if self.config.representation == "temporal":
            return e_t
        return torch.cat([e_d, e_t], dim=-1)

    # === 输出头 ===

    def forecast_from(self, e_d: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        """z̃ = W_s[e^d ; e^T] + b_s, 无输出激活"""
        if e_d.shape[-1] != self.config.d_model or e_t.shape[-1] != self.config.d_model:
            raise ShapeMismatchError(
                f"预测头输入宽度应为 {self.config.d_model}, 实际 {e_d.shape[-1]}/{e_t.shape[-1]}")
        joined = torch.cat([e_d, e_t], dim=-1)
        return dense_forward(joined, self.forecast_head.weight, self.forecast_head.bias)

    def forecast(self, batch: EpisodeBatch) -> torch.Tensor:
        e_d, e_t, _ = self.encode(batch)
        return self.forecast_from(e_d, e_t)

    def classify(self, batch: EpisodeBatch) -> torch.Tensor:
        """分类 logits (B, K); softmax 在损失函数中完成"""
        return self.classifier(self.represent(batch))

    def reset_classifier(self, n_clusters: int, seed: int) -> None:
        """按新的簇数重建分类头"""
        with _INIT_LOCK:
            generator_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
            self.classifier = glorot_init_(
                nn.Linear(self.config.representation_width, n_clusters).to(DTYPE))
            torch.random.set_rng_state(generator_state)
        self.config = self.config.replace(n_clusters=n_clusters)

    def encoder_parameters(self) -> List[str]:
        """编码器部分的参数名(不含分类头), 用于迁移学习"""
        return [name for name in self.state_dict() if not name.startswith("classifier.")]


def build_network(n_features: int, static_width: int, config: ModelConfig,
                  seed: Optional[int] = None) -> SlacTimeNet:
    """按种子构造并初始化网络(64位浮点)"""
    with _INIT_LOCK:
        torch.manual_seed(config.seed if seed is None else seed)
        net = SlacTimeNet(n_features, static_width, config).to(DTYPE)
        return glorot_init_(net)


def encode_episode(net: SlacTimeNet, episode: EpisodeRecord) -> Tuple[torch.Tensor, torch.Tensor]:
    """单个受试者: 返回 (e^T, 每个三元组的融合权重)"""
    if not episode.triplets:
        raise EmptyEpisodeError(f"受试者 {episode.episode_id} 没有任何三元组")
    batch = collate([episode_arrays(episode)])
    e_t, weights = net.encode_triplets(batch)
    return e_t[0], weights[0]


@torch.no_grad()
def represent_episodes(net: SlacTimeNet, episodes: Sequence[EpisodeRecord],
                       batch_size: int = 8) -> np.ndarray:
    """推理: 所有受试者的表征矩阵 (N, p)"""
    net.eval()
    samples = [episode_arrays(e) for e in episodes]
    rows = []
    for start in range(0, len(samples), batch_size):
        rows.append(net.represent(collate(samples[start:start + batch_size])).numpy())
    if not rows:
        return np.zeros((0, net.config.representation_width))
    return np.vstack(rows)
