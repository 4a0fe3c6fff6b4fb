"""
数值核心模块 - 所有可学习组件共用的可微分基本运算
基于 torch autograd, 全部使用64位浮点; 另提供独立的中心差分梯度核验
"""

import logging
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core.config import Config
from core.errors import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def configure_determinism(threads: int = 1) -> None:
    """单线程 + 确定性算法, 保证同样的 (种子, 数据, 配置) 逐位复现"""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def dense_forward(inputs: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """
    仿射层 output = weight · input + bias

    反向传播由 autograd 记录, 梯度同时累积到三个操作数
    """
    if weight.dim() != 2 or inputs.shape[-1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"输入宽度 {tuple(inputs.shape)} 与权重 {tuple(weight.shape)} 不匹配")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"偏置形状 {tuple(bias.shape)} 应为 ({weight.shape[0]},)")
    return F.linear(inputs, weight, bias)


def softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """数值稳定的 softmax: 先减去最大值; 被屏蔽的位置可以传入 -inf"""
    shift = scores.max(dim=dim, keepdim=True).values.detach()
    exps = torch.exp(scores - shift)
    return exps / exps.sum(dim=dim, keepdim=True)


def glorot_init_(module: nn.Module) -> nn.Module:
    """权重 U(±√(6/(fan_in+fan_out))), 偏置为0"""
    for name, param in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(param)
        elif param.dim() >= 2:
            nn.init.xavier_uniform_(param)
        else:
            # 向量形参数(如注意力打分向量 u)按 (n, 1) 处理
            bound = np.sqrt(6.0 / (param.numel() + 1))
            nn.init.uniform_(param, -bound, bound)
    return module


class AdamStepper:
    """
    Adam 优化器(带偏差修正), 每步之后梯度清零

    m ← β1·m + (1−β1)·g; v ← β2·v + (1−β2)·g²; θ ← θ − lr·m̂/(√v̂ + ε)
    """

    def __init__(self, named_params, learning_rate: float = Config.LEARNING_RATE,
                 beta1: float = Config.ADAM_BETA1, beta2: float = Config.ADAM_BETA2,
                 epsilon: float = Config.ADAM_EPSILON):
        self.named_params = [(name, p) for name, p in named_params if p.requires_grad]
        self.optimizer = torch.optim.Adam([p for _, p in self.named_params],
                                          lr=learning_rate, betas=(beta1, beta2), eps=epsilon)
        self.step_count = 0

    def step(self) -> None:
        for name, param in self.named_params:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NonFiniteError(f"张量 {name} 的梯度含有非有限值")
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=False)
        self.step_count += 1

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)


def finite_diff_check(computation: Callable[[], torch.Tensor],
                      params: Sequence[torch.Tensor],
                      eps: float = 1e-5,
                      max_coords: int = 64,
                      seed: int = 0) -> float:
    """
    用中心差分核验 autograd 梯度

    参数:
        computation: 无参闭包, 返回标量损失
        params: 需要核验的叶子张量
        eps: 差分步长
        max_coords: 坐标总数超过此值时随机抽样

    返回:
        抽样坐标上 |解析 − 差分| / max(|解析|, |差分|, 1e-12) 的最大值
    """
    params = list(params)
    loss = computation()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(picked)]

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].data.view(-1)
            original = flat[j].item()
            flat[j] = original + eps
            upper = computation().item()
            flat[j] = original - eps
            lower = computation().item()
            flat[j] = original
            numeric = (upper - lower) / (2.0 * eps)
            exact = analytic[i].view(-1)[j].item()
            scale = max(abs(exact), abs(numeric), 1e-12)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst


def module_to_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    """导出全部参数为 numpy 数组(用于持久化与最优权重快照)"""
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def arrays_to_module(module: nn.Module, arrays: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
    """
    把数组写回模块; 形状不一致时报错

    返回:
        未被覆盖的参数名(strict=False 时允许, 例如新建的分类头)
    """
    state = module.state_dict()
    missing = [name for name in state if name not in arrays]
    if strict and missing:
        raise ShapeMismatchError(f"权重中缺少参数: {missing}")
    for name, array in arrays.items():
        if name not in state:
            if strict:
                raise ShapeMismatchError(f"模块中没有参数 {name}")
            continue
        if tuple(state[name].shape) != tuple(array.shape):
            raise ShapeMismatchError(
                f"参数 {name} 形状 {tuple(array.shape)} 与模块 {tuple(state[name].shape)} 不一致")
        state[name] = torch.as_tensor(array, dtype=DTYPE)
    module.load_state_dict(state)
    return missing
