"""
配置文件 - 存储所有流水线参数设置
默认常量集中在 Config 类中,结构化参数使用 dataclass 并在构造时校验
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, get_type_hints

from core.errors import ConfigError


class Config:
    """流水线配置类 - 集中管理所有默认参数"""

    # 时间序列标准化参数
    HORIZON_HOURS = 120              # 入院后前五天,按小时分箱
    OBSERVATION_WINDOWS = (24, 48, 72, 96, 118)  # 观测窗口结束时刻(小时)
    PREDICTION_HOURS = 2             # 观测窗口之后的预测窗口长度
    STD_EPSILON = 1e-12              # 标准差小于此值视为常数特征

    # 静态特征插补
    IMPUTE_SWEEPS = 10               # 轮换回归的遍数

    # 训练参数
    BATCH_SIZE = 8
    LEARNING_RATE = 5e-4
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 1e-8
    PATIENCE = 10                    # 验证损失连续10个epoch不下降则停止
    PRETRAIN_MAX_EPOCHS = 50         # 桌面规模的预训练上限
    CLASSIFIER_EPOCHS = 200          # 每次迭代的分类器epoch上限
    SLAC_ITERATIONS = 25             # 桌面规模的迭代次数(完整规模为500)
    VALIDATION_FRACTION = 0.2        # 80:20 训练/验证

    # 迭代提前终止: 相邻两次伪标签 ARI 连续3次 ≥ 0.999
    AGREEMENT_STOP = 0.999
    AGREEMENT_PATIENCE = 3

    # K-means 参数
    KMEANS_RESTARTS = 10
    KMEANS_MAX_ITER = 300

    # 聚类指标
    CH_SENTINEL = 1e12               # 簇内散度为0时的 Calinski-Harabasz 哨兵值
    CH_WITHIN_EPSILON = 1e-30

    # 外部验证
    TEST_FRACTION = 0.15
    N_FOLDS = 10
    N_PERMUTATIONS = 999
    EXACT_MATCHING_LIMIT = 14        # 合并样本数不超过此值时精确求最小权完美匹配
    SIGNIFICANCE = 0.05

    # 统计
    Z_95 = 1.96

    # 默认超参数网格
    DEFAULT_GRID = {
        "M": [1, 2],
        "d": [8, 16, 32, 64, 128],
        "h": [2, 4, 8],
        "K": [3, 4, 5],
    }

    # 产物文件名
    TRIPLET_FILE = "triplets.csv"
    STATIC_FILE = "static.csv"
    METADATA_FILE = "metadata.csv"
    SCHEMA_FILE = "schema.json"
    RANGES_FILE = "ranges.json"
    COHORT_FILE = "cohort.json"
    PRETRAIN_WEIGHTS = "pretrain"
    SLAC_WEIGHTS = "slac"
    CLASSIFIER_WEIGHTS = "classifier"
    LOSS_HISTORY_FILE = "loss_history.csv"
    LABELS_FILE = "labels.csv"
    SCORES_FILE = "scores.json"
    ITERATIONS_FILE = "iterations.csv"
    SWEEP_TABLE_FILE = "sweep.csv"
    SWEEP_SUMMARY_FILE = "sweep_summary.json"
    REPORT_FILE = "report.json"
    VALIDATION_FILE = "validation_report.json"
    PCA_FILE = "pca.csv"
    STATIC_SUMMARY_FILE = "phenotype_static.csv"
    HOURLY_FILE = "phenotype_hourly.csv"
    TESTS_FILE = "kruskal_wallis.csv"
    COHORT_SUMMARY_FILE = "cohort_summary.csv"
    EXTERNAL_LABELS_FILE = "external_labels.csv"
    PROCESSED_DIR = "processed"


def config_hash(payload) -> str:
    """对可 JSON 序列化的配置求稳定哈希(键排序后 SHA-256 的前16位)"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def vocab_hash(names: Sequence[str]) -> str:
    """特征词表哈希,用于拒绝过期权重"""
    return config_hash(list(names))


def checked_fields(cls, values: Dict, what: str) -> Dict:
    """按 dataclass 字段注解检查标量类型, 整数可以写在浮点字段里"""
    hints = get_type_hints(cls)
    checked = {}
    for name, value in values.items():
        expected = hints.get(name)
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif expected in (int, float, str) and (isinstance(value, bool) or not isinstance(value, expected)):
            raise ConfigError(f"{what} {name} 应为 {expected.__name__}, 实际为 {value!r}")
        checked[name] = value
    return checked


@dataclass
class ModelConfig:
    """
    模型超参数 M/d/h/K 以及训练开关

    d 按嵌入维度理解(即 R^d 的维度, 不是层数)
    """
    n_blocks: int = 1                # M: transformer 块数
    d_model: int = 8                 # d: 嵌入维度
    n_heads: int = 2                 # h: 注意力头数
    n_clusters: int = 3              # K: 簇数
    batch_size: int = Config.BATCH_SIZE
    patience: int = Config.PATIENCE
    pretrain_epochs: int = Config.PRETRAIN_MAX_EPOCHS
    classifier_epochs: int = Config.CLASSIFIER_EPOCHS
    iterations: int = Config.SLAC_ITERATIONS
    learning_rate: float = Config.LEARNING_RATE
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    epsilon: float = Config.ADAM_EPSILON
    kmeans_restarts: int = Config.KMEANS_RESTARTS
    kmeans_max_iter: int = Config.KMEANS_MAX_ITER
    representation: str = "concat"   # "concat" = [e^d; e^T], "temporal" = 仅 e^T
    split_mode: str = "instance"     # 预训练切分: "instance" 或 "episode"
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"M 必须 ≥ 1, 当前为 {self.n_blocks}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d={self.d_model} 不能被 h={self.n_heads} 整除")
        if self.n_clusters < 2:
            raise ConfigError(f"K 必须 ≥ 2, 当前为 {self.n_clusters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size 必须 ≥ 1, 当前为 {self.batch_size}")
        if self.representation not in ("concat", "temporal"):
            raise ConfigError(f"未知的表征方式: {self.representation}")
        if self.split_mode not in ("instance", "episode"):
            raise ConfigError(f"未知的切分方式: {self.split_mode}")

    @property
    def representation_width(self) -> int:
        """送入 K-means 与分类器的向量宽度"""
        return 2 * self.d_model if self.representation == "concat" else self.d_model

    def architecture(self) -> Dict[str, int]:
        """决定编码器参数形状的部分,用于权重兼容性检查(与K无关)"""
        return {"M": self.n_blocks, "d": self.d_model, "h": self.n_heads}

    def replace(self, **changes) -> "ModelConfig":
        values = asdict(self)
        values.update(changes)
        return ModelConfig(**values)

    @classmethod
    def from_dict(cls, raw: Dict) -> "ModelConfig":
        # 兼容简写 M/d/h/K
        aliases = {"M": "n_blocks", "d": "d_model", "h": "n_heads", "K": "n_clusters"}
        values = {aliases.get(k, k): v for k, v in raw.items()}
        known = cls.__dataclass_fields__.keys()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"未知的模型配置项: {unknown}")
        return cls(**checked_fields(cls, values, "模型配置项"))


@dataclass
class SynthSpec:
    """合成队列的生成参数"""
    n_episodes: int = 300
    n_phenotypes: int = 3
    phenotype_proportions: Optional[List[float]] = None   # None 表示均匀
    n_ts_features: int = 10
    n_static_features: int = 4
    missingness_rate: float = 0.3
    separation: float = 3.0
    seed: int = 0
    generator_seed: Optional[int] = None  # 表型生成参数的种子, 缺省等于 seed

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError("n_episodes 必须 ≥ 1")
        if self.n_ts_features < 1:
            raise ConfigError("n_ts_features 必须 ≥ 1")
        if self.n_phenotypes < 1:
            raise ConfigError("n_phenotypes 必须 ≥ 1")
        if self.n_static_features < 0:
            raise ConfigError("n_static_features 不能为负")
        if self.phenotype_proportions is None:
            self.phenotype_proportions = [1.0 / self.n_phenotypes] * self.n_phenotypes
        if len(self.phenotype_proportions) != self.n_phenotypes:
            raise ConfigError("phenotype_proportions 长度必须等于 n_phenotypes")
        if any(p < 0 for p in self.phenotype_proportions) or \
                abs(sum(self.phenotype_proportions) - 1.0) > 1e-9:
            raise ConfigError("phenotype_proportions 之和必须为 1")
        if not 0.0 <= self.missingness_rate < 1.0:
            raise ConfigError("missingness_rate 必须在 [0, 1) 内")
        if self.separation < 0:
            raise ConfigError("separation 不能为负")

    @classmethod
    def from_dict(cls, raw: Dict) -> "SynthSpec":
        unknown = sorted(set(raw) - set(cls.__dataclass_fields__.keys()))
        if unknown:
            raise ConfigError(f"未知的合成配置项: {unknown}")
        try:
            return cls(**checked_fields(cls, raw, "合成配置项"))
        except TypeError as error:
            raise ConfigError(f"合成配置取值无效: {error}") from error


@dataclass
class RunConfig:
    """
    一次运行的完整配置: 路径 + 模型参数 + 阶段开关 + 种子

    seed 必填; 不使用系统时钟作为默认种子
    """
    seed: int
    paths: Dict[str, str] = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: Dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("必须提供 seed")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        # 运行级种子同时作为模型种子
        self.model = self.model.replace(seed=int(self.seed))

    def stage_enabled(self, name: str) -> bool:
        return bool(self.stages.get(name, True))

    def hash(self) -> str:
        return config_hash({"seed": self.seed, "model": asdict(self.model)})

    @classmethod
    def from_dict(cls, raw: Dict) -> "RunConfig":
        if "seed" not in raw:
            raise ConfigError("运行配置缺少 seed")
        seed = raw["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed 应为整数, 实际为 {seed!r}")
        for section in ("paths", "model", "stages"):
            if not isinstance(raw.get(section, {}), dict):
                raise ConfigError(f"运行配置的 {section} 应为对象")
        return cls(seed=seed,
                   paths=dict(raw.get("paths", {})),
                   model=ModelConfig.from_dict(raw.get("model", {})),
                   stages=dict(raw.get("stages", {})))


def derive_seed(*parts) -> int:
    """由 (种子, 网格点/迭代序号 ...) 派生子任务种子, 与执行顺序无关"""
    return int(config_hash([str(p) for p in parts])[:8], 16)
