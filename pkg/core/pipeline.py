"""
流水线阶段 - 每个命令行子命令对应一个 run_* 函数

阶段之间只通过文件传递: 读入上游产物, 写出本阶段产物, 返回一行 JSON 摘要
权重清单记录配置哈希与词表哈希, 下游阶段加载时核对
"""

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from core import synth
from core.cohort import CohortDataset, drop_empty_episodes, preprocess_cohort
from core.config import Config, ModelConfig, RunConfig, SynthSpec, config_hash, vocab_hash
from core.crossmatch import compare_phenotype_distributions
from core.errors import ConfigError
from core.file_handler import FileHandler
from core.numeric import arrays_to_module, module_to_arrays
from core.stats import characterize, label_map, pca_project, summarize_cohort
from training.evaluate import cross_apply, make_folds, train_phenotype_classifier
from training.neural_network import build_network, represent_episodes
from training.self_supervision import pretrain
from training.slac_loop import ITERATION_COLUMNS, run_slac
from training.sweep import SWEEP_COLUMNS, parse_grid, sweep

logger = logging.getLogger(__name__)

# 与分类头无关的训练参数变化不影响预训练权重
_CLASSIFIER_ONLY = ("n_clusters", "iterations", "classifier_epochs", "representation",
                    "kmeans_restarts", "kmeans_max_iter")


def pretrain_signature(model: ModelConfig) -> str:
    return config_hash({k: v for k, v in asdict(model).items() if k not in _CLASSIFIER_ONLY})


def cohort_signature(cohort: CohortDataset) -> Dict[str, str]:
    return {"vocab_hash": vocab_hash(cohort.feature_vocab),
            "static_hash": vocab_hash(cohort.static_columns)}


def require_paths(**paths) -> None:
    """阶段开始时所有引用的路径必须存在"""
    missing = [f"{name}={path}" for name, path in paths.items() if path is None or not Path(path).exists()]
    if missing:
        raise ConfigError(f"以下路径不存在: {missing}")


# === 网络持久化 ===

def save_network(net, prefix, run: RunConfig, cohort: CohortDataset, stage: str, **extra) -> Path:
    meta = dict(stage=stage, seed=run.seed, config_hash=run.hash(),
                pretrain_hash=pretrain_signature(net.config),
                n_features=cohort.n_features, static_width=cohort.static_width,
                model=asdict(net.config), **cohort_signature(cohort), **extra)
    manifest, _ = FileHandler.save_weights(prefix, module_to_arrays(net), meta)
    return manifest


def load_network(prefix, cohort: CohortDataset, model: ModelConfig, expect: Dict):
    """按清单重建网络; expect 中的键不一致时抛 StaleArtifactError"""
    expect = dict(expect, **cohort_signature(cohort))
    tensors, manifest = FileHandler.load_weights(prefix, expect=expect)
    saved = ModelConfig.from_dict(manifest["model"])
    config = model.replace(n_clusters=saved.n_clusters, representation=saved.representation)
    net = build_network(cohort.n_features, cohort.static_width, config)
    arrays_to_module(net, tensors)
    return net, manifest


def _load_cohort(cohort_dir) -> Tuple[CohortDataset, Dict]:
    require_paths(cohort=cohort_dir)
    return FileHandler.load_processed_cohort(cohort_dir)


# === synth ===

def run_synth(spec: SynthSpec, out_dir) -> Dict:
    """生成合成队列并按原始输入格式写出(三元组、静态、元数据、模式、范围)"""
    out_dir = Path(out_dir)
    cohort = synth.generate(spec)
    paths = FileHandler.write_cohort(cohort, out_dir)
    FileHandler.write_json(out_dir / Config.SCHEMA_FILE, FileHandler.schema_to_dict(cohort.static_schema))
    FileHandler.write_json(out_dir / Config.RANGES_FILE,
                           {k: list(v) for k, v in synth.clinical_ranges(spec).items()})
    return {"stage": "synth", "episodes": len(cohort.episodes), "features": cohort.n_features,
            "triplets": sum(len(e.triplets) for e in cohort.episodes),
            "files": sorted(p.name for p in paths.values()), "out": str(out_dir)}


# === preprocess ===

def run_preprocess(input_dir, out_dir, stats_from=None,
                   triplets=None, static=None, schema=None, ranges=None, metadata=None) -> Dict:
    """
    读取原始队列并完成全部预处理

    stats_from 指向另一个预处理目录时, 沿用其词表、标准化统计与静态统计(外部验证队列)
    """
    input_dir = Path(input_dir) if input_dir else None

    def pick(explicit, name):
        if explicit is not None:
            return Path(explicit)
        return input_dir / name if input_dir else None

    triplets, static = pick(triplets, Config.TRIPLET_FILE), pick(static, Config.STATIC_FILE)
    schema, ranges = pick(schema, Config.SCHEMA_FILE), pick(ranges, Config.RANGES_FILE)
    metadata = pick(metadata, Config.METADATA_FILE)
    require_paths(triplets=triplets, static=static, schema=schema, ranges=ranges)

    vocab, stats, static_stats, impute_reference = None, None, None, None
    if stats_from is not None:
        source_cohort, source = _load_cohort(stats_from)
        vocab = source["feature_vocab"]
        stats = source_cohort.normalization_stats
        static_stats = source_cohort.static_stats
        impute_reference = source_cohort.impute_reference

    raw = FileHandler.parse_cohort(triplets, static, schema=FileHandler.read_schema(schema),
                                   metadata_file=metadata if metadata and metadata.exists() else None,
                                   feature_vocab=vocab)
    processed = preprocess_cohort(raw, FileHandler.read_ranges(ranges), stats=stats, static_stats=static_stats,
                                  impute_reference=impute_reference)
    signature = dict(cohort_signature(processed),
                     cohort_hash=config_hash({"vocab": processed.feature_vocab,
                                              "static": processed.static_columns,
                                              "stats": {k: list(v) for k, v in processed.normalization_stats.items()},
                                              "static_stats": {k: list(v) for k, v in processed.static_stats.items()}}))
    FileHandler.write_processed_cohort(processed, out_dir, extra=signature)
    return {"stage": "preprocess", "episodes": len(processed.episodes),
            "features": processed.n_features, "static_width": processed.static_width,
            "clipped": sum(processed.clip_report.values()),
            "empty_episodes": sum(1 for e in processed.episodes if not e.triplets),
            "external_stats": stats_from is not None, "out": str(out_dir), **signature}


# === pretrain ===

def run_pretrain(run: RunConfig, cohort_dir, out_dir) -> Dict:
    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    net, history = pretrain(cohort, run.model)
    FileHandler.write_table(out_dir / Config.LOSS_HISTORY_FILE, history.rows,
                            ["epoch", "train_loss", "val_loss"])
    manifest = save_network(net, out_dir / Config.PRETRAIN_WEIGHTS, run, cohort, "pretrain",
                            best_epoch=history.best_epoch)
    return {"stage": "pretrain", "epochs": len(history.rows) - 1, "best_epoch": history.best_epoch,
            "initial_val_loss": history.initial_val_loss, "best_val_loss": history.best_val_loss,
            "weights": str(manifest), "config_hash": run.hash()}


def _load_pretrained(run: RunConfig, cohort: CohortDataset, weights):
    require_paths(weights=Path(weights).with_suffix(".json"))
    net, _ = load_network(weights, cohort, run.model,
                          expect={"pretrain_hash": pretrain_signature(run.model), "stage": "pretrain"})
    return net


# === cluster ===

def run_cluster(run: RunConfig, cohort_dir, out_dir, weights=None) -> Dict:
    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    weights = weights or out_dir / Config.PRETRAIN_WEIGHTS
    pretrained = _load_pretrained(run, cohort, weights)

    result = run_slac(cohort, run.model, pretrained=pretrained)
    FileHandler.write_labels(out_dir / Config.LABELS_FILE, result.episode_ids, result.labels)
    FileHandler.write_table(out_dir / Config.ITERATIONS_FILE,
                            [r.to_row() for r in result.iterations], ITERATION_COLUMNS)
    save_network(result.net, out_dir / Config.SLAC_WEIGHTS, run, cohort, "slac",
                 n_clusters=run.model.n_clusters)
    scores = result.scores.to_dict() if result.scores else None
    FileHandler.write_json(out_dir / Config.SCORES_FILE,
                           {"scores": scores, "model": asdict(run.model), "seed": run.seed,
                            "config_hash": run.hash(), "iterations_run": len(result.iterations),
                            "cluster_sizes": np.bincount(result.labels, minlength=run.model.n_clusters).tolist()})
    return {"stage": "cluster", "episodes": len(result.labels), "K": run.model.n_clusters,
            "iterations_run": len(result.iterations), "scores": scores,
            "labels": str(out_dir / Config.LABELS_FILE), "config_hash": run.hash()}


# === sweep ===

def run_sweep(run: RunConfig, cohort_dir, grid_path, out_dir, workers: int = 1) -> Dict:
    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    grid = parse_grid(FileHandler.read_json(grid_path) if grid_path else None)
    table = sweep(cohort, grid, base=run.model, workers=workers)
    FileHandler.write_table(out_dir / Config.SWEEP_TABLE_FILE, table.records(), SWEEP_COLUMNS)
    summary = dict(table.summary(), grid=grid, seed=run.seed, config_hash=run.hash())
    FileHandler.write_json(out_dir / Config.SWEEP_SUMMARY_FILE, summary)

    selected = table.select()
    best = table.runs[selected.key]
    FileHandler.write_labels(out_dir / Config.LABELS_FILE, best.episode_ids, best.labels)
    return {"stage": "sweep", "rows": len(table.rows), "skipped": len(table.skipped),
            "selected": summary["selected"], "config_hash": run.hash()}


# === characterize ===

def _read_labels(path, cohort: CohortDataset) -> Tuple[CohortDataset, Dict[str, int]]:
    """读取标签并把队列限制到有标签的受试者"""
    require_paths(labels=path)
    labels = FileHandler.read_labels(path)
    unknown = sorted(set(labels) - set(cohort.episode_ids))
    if unknown:
        raise ConfigError(f"标签文件中有队列之外的受试者: {unknown[:5]}")
    labeled = cohort.subset([i for i in cohort.episode_ids if i in labels])
    skipped = len(cohort.episodes) - len(labeled.episodes)
    if skipped:
        logger.info("%d 个受试者没有标签(没有时间序列观测), 不参与分析", skipped)
    return labeled, labels


def run_characterize(cohort_dir, labels_path, out_dir, compare_dir=None) -> Dict:
    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    full_cohort = cohort
    cohort, labels = _read_labels(labels_path, cohort)
    report = characterize(cohort, labels)

    FileHandler.write_json(out_dir / Config.REPORT_FILE, report.to_dict())
    FileHandler.write_table(out_dir / Config.STATIC_SUMMARY_FILE, report.static_records(),
                            ["cluster", "feature", "mean", "sd", "n"])
    FileHandler.write_table(out_dir / Config.HOURLY_FILE, report.temporal_records(),
                            ["cluster", "feature", "hour", "mean", "ci_low", "ci_high", "n"])
    FileHandler.write_table(out_dir / Config.TESTS_FILE, report.test_records(), ["kind", "feature", "H", "p"])

    cohorts = {"cohort": full_cohort}
    if compare_dir is not None:
        cohorts["compare"], _ = _load_cohort(compare_dir)
    summary_rows = summarize_cohort(cohorts)
    FileHandler.write_table(out_dir / Config.COHORT_SUMMARY_FILE, summary_rows, ["variable"] + list(cohorts))
    return {"stage": "characterize", "clusters": report.clusters, "counts": report.counts,
            "significant": report.significant_features(), "planted_ari": report.planted_ari,
            "report": str(out_dir / Config.REPORT_FILE)}


# === validate ===

def run_validate(run: RunConfig, cohort_dir, labels_path, external_dir, out_dir,
                 weights=None, random_baseline: bool = False) -> Dict:
    """
    外部验证: 在源队列的伪标签上训练分类器(10折分层、迁移学习), 应用到外部队列,
    再按表型做交叉匹配检验
    """

    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    cohort = drop_empty_episodes(cohort)
    cohort, labels = _read_labels(labels_path, cohort)
    external, description = _load_cohort(external_dir)
    pretrained = _load_pretrained(run, cohort, weights or out_dir / Config.PRETRAIN_WEIGHTS)

    mapping = label_map(cohort, labels)
    plan = make_folds(cohort.episode_ids, [mapping[i] for i in cohort.episode_ids],
                      k=Config.N_FOLDS, seed=run.seed)
    outcome = train_phenotype_classifier(cohort, mapping, pretrained, plan, run.model, init="pretrained")
    classifier = outcome.classifier
    save_network(classifier.net, out_dir / Config.CLASSIFIER_WEIGHTS, run, cohort, "classifier",
                 classes=classifier.classes)

    external_ids, external_labels = cross_apply(classifier, external)
    FileHandler.write_labels(out_dir / Config.EXTERNAL_LABELS_FILE, external_ids, external_labels)

    source_labels = np.asarray([mapping[i] for i in cohort.episode_ids])
    reps_source = represent_episodes(classifier.net, cohort.episodes)
    reps_external = represent_episodes(classifier.net, external.subset(external_ids).episodes)
    comparison = compare_phenotype_distributions(source_labels, external_labels,
                                                 reps_source, reps_external,
                                                 n_perm=Config.N_PERMUTATIONS, seed=run.seed)

    report = {"classifier": outcome.to_dict(), "comparison": comparison.to_dict(),
              "verdict": comparison.verdict, "plan": plan.to_dict(),
              "external_cohort_hash": description.get("cohort_hash"),
              "seed": run.seed, "config_hash": run.hash()}
    if random_baseline:
        baseline = train_phenotype_classifier(cohort, mapping, None, plan, run.model, init="random")
        report["random_init"] = baseline.to_dict()
    FileHandler.write_json(out_dir / Config.VALIDATION_FILE, report)
    return {"stage": "validate", "test_accuracy": outcome.test_accuracy,
            "verdict": comparison.verdict,
            "p_values": {str(k): r.p_value for k, r in comparison.per_phenotype.items()},
            "report": str(out_dir / Config.VALIDATION_FILE), "config_hash": run.hash()}


# === pca ===

def run_pca(run: RunConfig, cohort_dir, labels_path, out_dir, weights=None) -> Dict:
    out_dir = Path(out_dir)
    cohort, _ = _load_cohort(cohort_dir)
    cohort, labels = _read_labels(labels_path, cohort)
    weights = Path(weights or out_dir / Config.SLAC_WEIGHTS)
    require_paths(weights=weights.with_suffix(".json"))
    net, _ = load_network(weights, cohort, run.model, expect={"config_hash": run.hash()})

    result = pca_project(represent_episodes(net, cohort.episodes))
    rows = [[eid, float(x), float(y), labels[eid]]
            for eid, (x, y) in zip(cohort.episode_ids, result.coordinates[:, :2])]
    FileHandler.write_table(out_dir / Config.PCA_FILE, rows, ["episode_id", "pc1", "pc2", "cluster"])
    return {"stage": "pca", "episodes": len(rows),
            "explained_variance_ratio": result.explained_variance_ratio.tolist(),
            "out": str(out_dir / Config.PCA_FILE), "config_hash": run.hash()}
