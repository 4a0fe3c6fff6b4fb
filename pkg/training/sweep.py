"""
超参数扫描 - 在 (M, d, h, K) 网格上运行伪标签迭代, 按三个有效性指标选择配置

同一 (M, d, h) 的预训练在不同 K 之间共享; 网格点可以多线程并行, 结果按网格顺序合并
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from core.cohort import CohortDataset, drop_empty_episodes
from core.config import Config, ModelConfig, derive_seed
from core.errors import ConfigError
from core.clustering import ValidityScores
from training.self_supervision import pretrain
from training.slac_loop import SlacRunResult, run_slac

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["M", "d", "h", "K", "SS", "CHS", "DBS"]

# 指标无法计算(退化聚类)时记为最差值, 保证表中没有 NaN
WORST_SCORES = ValidityScores(silhouette=-1.0, calinski_harabasz=0.0,
                              davies_bouldin=Config.CH_SENTINEL)


@dataclass(frozen=True)
class SweepRow:
    M: int
    d: int
    h: int
    K: int
    SS: float
    CHS: float
    DBS: float

    @property
    def key(self) -> Tuple[int, int, int, int]:
        return (self.M, self.d, self.h, self.K)

    def to_row(self) -> list:
        return [self.M, self.d, self.h, self.K, self.SS, self.CHS, self.DBS]

    def describe(self) -> str:
        return (f"M={self.M},d={self.d},h={self.h},K={self.K} → "
                f"{self.SS:.2f},{self.CHS:.2f},{self.DBS:.2f}")


@dataclass
class SweepTable:
    rows: List[SweepRow]
    skipped: List[Tuple[int, int]] = field(default_factory=list)
    runs: Dict[Tuple[int, int, int, int], SlacRunResult] = field(default_factory=dict, repr=False)

    def wins(self) -> List[int]:
        """每一行在 {SS 最大, CHS 最大, DBS 最小} 中取得最优的个数(并列都算)"""
        if not self.rows:
            return []
        best_ss = max(r.SS for r in self.rows)
        best_ch = max(r.CHS for r in self.rows)
        best_db = min(r.DBS for r in self.rows)
        return [int(r.SS == best_ss) + int(r.CHS == best_ch) + int(r.DBS == best_db)
                for r in self.rows]

    def select(self) -> SweepRow:
        """三个指标中占优最多的行; 并列时取 (M, d, h, K) 字典序最小者"""
        if not self.rows:
            raise ConfigError("扫描表为空, 没有可选择的配置")
        wins = self.wins()
        top = max(wins)
        return min((r for r, w in zip(self.rows, wins) if w == top), key=lambda r: r.key)

    def records(self) -> List[list]:
        return [r.to_row() for r in self.rows]

    def summary(self) -> Dict:
        selected = self.select()
        wins = self.wins()
        return {
            "selected": dict(zip(SWEEP_COLUMNS, selected.to_row())),
            "selected_text": selected.describe(),
            "majority": wins[self.rows.index(selected)] >= 2,
            "rows": len(self.rows),
            "skipped": [{"d": d, "h": h} for d, h in self.skipped],
        }


def parse_grid(raw: Optional[Dict]) -> Dict[str, List[int]]:
    """网格 JSON: {"M": [...], "d": [...], "h": [...], "K": [...]}, 缺省项取默认网格"""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(Config.DEFAULT_GRID))
    if unknown:
        raise ConfigError(f"未知的网格维度: {unknown}")
    grid = {}
    for name, default in Config.DEFAULT_GRID.items():
        values = raw.get(name, default)
        if isinstance(values, int):
            values = [values]
        values = sorted({int(v) for v in values})
        if not values:
            raise ConfigError(f"网格维度 {name} 为空")
        grid[name] = values
    return grid


def valid_architectures(grid: Dict[str, Sequence[int]]) -> Tuple[List[Tuple[int, int, int]], List[Tuple[int, int]]]:
    """返回 (合法的 (M, d, h) 列表, 被跳过的 (d, h) 组合)"""
    architectures, skipped = [], []
    for d, h in itertools.product(grid["d"], grid["h"]):
        if d % h != 0:
            skipped.append((d, h))
            logger.warning("跳过网格点 d=%d, h=%d: d 不能被 h 整除", d, h)
            continue
        architectures.extend((m, d, h) for m in grid["M"])
    return sorted(architectures), skipped


def _map(function, jobs: Iterable, workers: int) -> list:
    jobs = list(jobs)
    if workers <= 1:
        return [function(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(function, jobs))


def sweep(cohort: CohortDataset, grid: Dict, base: Optional[ModelConfig] = None,
          workers: int = 1) -> SweepTable:
    """
    在网格上运行完整流程并生成评估表

    参数:
        cohort: 已预处理的队列
        grid: {"M": [...], "d": [...], "h": [...], "K": [...]}
        base: 训练参数(批大小、迭代次数等)与基础种子
        workers: 并行线程数; 结果与串行一致

    返回:
        SweepTable, 每个合法网格点一行
    """
    base = base or ModelConfig()
    grid = parse_grid(grid)
    if any(k < 2 for k in grid["K"]):
        raise ConfigError(f"K 必须 ≥ 2: {grid['K']}")
    architectures, skipped = valid_architectures(grid)
    if not architectures:
        raise ConfigError("网格中没有合法的 (d, h) 组合")

    view = drop_empty_episodes(cohort).without_metadata()
    logger.info("开始超参数扫描: %d 个结构 × %d 个 K", len(architectures), len(grid["K"]))

    def arch_config(arch: Tuple[int, int, int]) -> ModelConfig:
        m, d, h = arch
        return base.replace(n_blocks=m, d_model=d, n_heads=h,
                            seed=derive_seed(base.seed, m, d, h))

    def pretrain_job(arch):
        net, _ = pretrain(view, arch_config(arch))
        return net

    nets = dict(zip(architectures, _map(pretrain_job, architectures, workers)))

    jobs = [(arch, k) for arch in architectures for k in grid["K"]]

    def slac_job(job):
        arch, k = job
        config = arch_config(arch).replace(n_clusters=k, seed=derive_seed(base.seed, *arch, k))
        return run_slac(view, config, pretrained=nets[arch])

    results = _map(slac_job, jobs, workers)

    table = SweepTable(rows=[], skipped=skipped)
    for (arch, k), result in zip(jobs, results):
        scores = result.scores or WORST_SCORES
        row = SweepRow(*arch, k, scores.silhouette, scores.calinski_harabasz, scores.davies_bouldin)
        table.rows.append(row)
        table.runs[row.key] = result
        logger.info("  %s", row.describe())

    selected = table.select()
    logger.info("✓ 扫描完成: 选择 %s", selected.describe())
    return table
