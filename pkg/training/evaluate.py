"""
外部验证 - 分层交叉验证、迁移学习的表型分类器、跨队列应用
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from core.cohort import CohortDataset, drop_empty_episodes
from core.config import Config, ModelConfig, derive_seed
from core.errors import ConfigError, ShapeMismatchError
from core.numeric import arrays_to_module, module_to_arrays
from core.stats import Labels, label_map
from training.neural_network import SlacTimeNet, build_network, episode_arrays
from training.trainer import NetworkTrainer, TrainingHistory, classify_batch_loss, predict_labels

logger = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    """k 折 (训练 id, 验证 id) + 独立测试集 id"""
    folds: List[Tuple[List[str], List[str]]]
    test_ids: List[str]

    @property
    def pool_ids(self) -> List[str]:
        return sorted({i for train, val in self.folds for i in train + val})

    def check_partition(self) -> None:
        """每折的训练与验证不相交; 各验证折合起来恰好是整个池; 测试集与池不相交"""
        pool = set(self.pool_ids)
        seen = []
        for train, val in self.folds:
            if set(train) & set(val) or set(train) | set(val) != pool:
                raise ConfigError("折内训练集与验证集没有划分整个池")
            seen.extend(val)
        if len(seen) != len(set(seen)) or set(seen) != pool:
            raise ConfigError("各验证折没有恰好覆盖整个池")
        if pool & set(self.test_ids):
            raise ConfigError("测试集与训练/验证池有交集")

    def to_dict(self) -> Dict:
        return {"test_ids": self.test_ids,
                "folds": [{"train": t, "validation": v} for t, v in self.folds]}


def make_folds(episode_ids: Sequence[str], labels: Sequence[int],
               test_fraction: float = Config.TEST_FRACTION,
               k: int = Config.N_FOLDS, seed: int = 0) -> FoldPlan:
    """
    分层切出测试集, 再对剩余部分做分层 k 折

    参数:
        episode_ids: 受试者 id
        labels: 与 id 对齐的表型标签
        test_fraction: 测试集比例 (默认 15%)
        k: 折数
        seed: 随机种子

    返回:
        FoldPlan
    """
    ids = np.asarray(list(episode_ids))
    labels = np.asarray(list(labels))
    if len(ids) != len(labels):
        raise ShapeMismatchError(f"id 数 {len(ids)} 与标签数 {len(labels)} 不一致")
    if k < 2:
        raise ConfigError(f"折数必须 ≥ 2, 当前为 {k}")
    classes, counts = np.unique(labels, return_counts=True)
    for cls, count in zip(classes, counts):
        if count < k:
            raise ConfigError(f"类别 {cls} 只有 {count} 个成员, 少于折数 {k}")

    state = seed % (2 ** 32)
    pool, test = train_test_split(np.arange(len(ids)), test_size=test_fraction,
                                  stratify=labels, random_state=state)
    pool = np.sort(pool)
    pool_classes, pool_counts = np.unique(labels[pool], return_counts=True)
    for cls, count in zip(pool_classes, pool_counts):
        if count < k:
            logger.warning("类别 %s 在训练/验证池中只有 %d 个成员, 部分折的验证集中没有该类", cls, count)

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=state)
    folds = [(ids[pool[train]].tolist(), ids[pool[val]].tolist())
             for train, val in splitter.split(pool, labels[pool])]
    plan = FoldPlan(folds=folds, test_ids=ids[np.sort(test)].tolist())
    plan.check_partition()
    logger.info("划分完成: 测试集 %d 个, 训练/验证池 %d 个, %d 折", len(plan.test_ids), len(pool), k)
    return plan


@dataclass
class PhenotypeClassifier:
    """表型分类器及其输入约定(词表、静态列、类别表)"""
    net: SlacTimeNet
    feature_vocab: List[str]
    static_columns: List[str]
    classes: List[int]
    normalization_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    static_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def predict(self, cohort: CohortDataset) -> np.ndarray:
        indices = predict_labels(self.net, [episode_arrays(e) for e in cohort.episodes],
                                 batch_size=self.net.config.batch_size)
        return np.asarray(self.classes, dtype=np.int64)[indices]


@dataclass
class ClassifierOutcome:
    classifier: PhenotypeClassifier
    fold_metrics: List[Dict] = field(default_factory=list)
    best_fold: int = 0
    test_accuracy: float = 0.0
    histories: List[TrainingHistory] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        accuracies = [m["val_accuracy"] for m in self.fold_metrics]
        return {"folds": self.fold_metrics,
                "mean_val_accuracy": float(np.mean(accuracies)) if accuracies else None,
                "best_fold": self.best_fold,
                "test_accuracy": self.test_accuracy,
                "classes": self.classifier.classes}


def _check_compatible(pretrained: SlacTimeNet, cohort: CohortDataset, config: ModelConfig) -> None:
    if pretrained.n_features != cohort.n_features or pretrained.static_width != cohort.static_width:
        raise ShapeMismatchError(
            f"预训练网络输入 (|F|={pretrained.n_features}, D={pretrained.static_width}) 与队列 "
            f"(|F|={cohort.n_features}, D={cohort.static_width}) 不一致")
    if pretrained.config.architecture() != config.architecture():
        raise ShapeMismatchError(
            f"预训练网络结构 {pretrained.config.architecture()} 与配置 {config.architecture()} 不一致")


def accuracy(classifier: PhenotypeClassifier, cohort: CohortDataset, mapping: Dict[str, int]) -> float:
    if not cohort.episodes:
        return 0.0
    predicted = classifier.predict(cohort)
    truth = np.asarray([mapping[e.episode_id] for e in cohort.episodes])
    return float(np.mean(predicted == truth))


def train_phenotype_classifier(cohort: CohortDataset, labels: Labels,
                               pretrained: Optional[SlacTimeNet], plan: FoldPlan,
                               config: ModelConfig, init: str = "pretrained") -> ClassifierOutcome:
    """
    在每一折上训练表型分类器, 用验证折早停; 取验证准确率最高的一折, 在测试集上评估一次

    参数:
        cohort: 已预处理的队列
        labels: 表型标签({episode_id: 标签} 或与 cohort.episodes 对齐)
        pretrained: 预测任务预训练的网络(init="pretrained" 时从它的编码器权重开始)
        plan: make_folds 的结果
        config: 模型与训练参数
        init: "pretrained" 迁移学习 / "random" 随机初始化对照

    返回:
        ClassifierOutcome
    """
    if init not in ("pretrained", "random"):
        raise ConfigError(f"未知的初始化方式: {init}")
    cohort = drop_empty_episodes(cohort)
    mapping = label_map(cohort, labels)
    classes = sorted(set(mapping[e.episode_id] for e in cohort.episodes))
    if len(classes) < 2:
        raise ConfigError("表型标签只有一类")
    index_of = {c: i for i, c in enumerate(classes)}
    config = config.replace(n_clusters=len(classes))

    encoder_weights = None
    if init == "pretrained":
        if pretrained is None:
            raise ConfigError("迁移学习需要预训练网络")
        _check_compatible(pretrained, cohort, config)
        encoder_weights = {name: array for name, array in module_to_arrays(pretrained).items()
                           if not name.startswith("classifier.")}

    def samples(ids: Sequence[str]):
        subset = cohort.subset(ids)
        return [(episode_arrays(e), index_of[mapping[e.episode_id]]) for e in subset.episodes]

    outcome = None
    best_key = None
    fold_metrics, histories = [], []
    for fold, (train_ids, val_ids) in enumerate(plan.folds):
        fold_seed = derive_seed(config.seed, "fold", fold)
        net = build_network(cohort.n_features, cohort.static_width, config, seed=fold_seed)
        if encoder_weights is not None:
            arrays_to_module(net, encoder_weights, strict=False)
        trainer = NetworkTrainer(net, config)
        history = trainer.fit(samples(train_ids), samples(val_ids), classify_batch_loss,
                              max_epochs=config.classifier_epochs, patience=config.patience,
                              seed=fold_seed, label=f"fold{fold}")
        classifier = PhenotypeClassifier(net, list(cohort.feature_vocab),
                                         list(cohort.static_columns), classes,
                                         dict(cohort.normalization_stats), dict(cohort.static_stats))
        val_accuracy = accuracy(classifier, cohort.subset(val_ids), mapping)
        fold_metrics.append({"fold": fold, "val_accuracy": val_accuracy,
                             "val_loss": history.best_val_loss, "best_epoch": history.best_epoch})
        histories.append(history)
        logger.info("第 %d 折: 验证准确率 %.4f, 验证损失 %.6f", fold, val_accuracy, history.best_val_loss)

        # 准确率最高者胜出; 并列时取验证损失较低、再并列取较早的折
        key = (-val_accuracy, history.best_val_loss, fold)
        if best_key is None or key < best_key:
            best_key = key
            outcome = ClassifierOutcome(classifier=classifier, best_fold=fold)

    outcome.fold_metrics = fold_metrics
    outcome.histories = histories
    outcome.test_accuracy = accuracy(outcome.classifier, cohort.subset(plan.test_ids), mapping)
    logger.info("✓ 表型分类器: 最优折 %d, 测试准确率 %.4f", outcome.best_fold, outcome.test_accuracy)
    return outcome


def input_differences(classifier: PhenotypeClassifier, cohort: CohortDataset) -> List[str]:
    """列出外部队列与分类器输入约定的差异"""
    problems = []
    if list(cohort.feature_vocab) != classifier.feature_vocab:
        missing = sorted(set(classifier.feature_vocab) - set(cohort.feature_vocab))
        extra = sorted(set(cohort.feature_vocab) - set(classifier.feature_vocab))
        problems.append(f"特征词表不一致: 缺少 {missing}, 多出 {extra}"
                        if missing or extra else "特征词表顺序不一致")
    if list(cohort.static_columns) != classifier.static_columns:
        missing = sorted(set(classifier.static_columns) - set(cohort.static_columns))
        extra = sorted(set(cohort.static_columns) - set(classifier.static_columns))
        problems.append(f"静态列不一致: 缺少 {missing}, 多出 {extra}"
                        if missing or extra else "静态列顺序不一致")
    for what, expected, actual in (("时间序列", classifier.normalization_stats, cohort.normalization_stats),
                                   ("静态列", classifier.static_stats, cohort.static_stats)):
        differing = sorted(name for name in set(expected) | set(actual)
                           if tuple(expected.get(name, ())) != tuple(actual.get(name, ())))
        if differing:
            problems.append(f"{what}标准化统计与源队列不一致: {differing}")
    return problems


def cross_apply(classifier: PhenotypeClassifier, other: CohortDataset) -> Tuple[List[str], np.ndarray]:
    """
    把分类器应用到另一个队列(该队列须用源队列的标准化统计与静态约定预处理)

    返回:
        (episode_ids, 预测标签); 没有三元组的受试者被排除
    """
    problems = input_differences(classifier, other)
    if problems:
        raise ShapeMismatchError("; ".join(problems))
    other = drop_empty_episodes(other)
    labels = classifier.predict(other)
    counts = {int(c): int((labels == c).sum()) for c in classifier.classes}
    logger.info("✓ 跨队列应用: %d 个受试者, 各表型人数 %s", len(labels), counts)
    return other.episode_ids, labels
