"""
slac-ts 命令行入口

子命令: synth | preprocess | pretrain | cluster | sweep | characterize | validate | pca
每个子命令写出自己的产物, 最后在标准输出打印一行 JSON 摘要; 日志写到标准错误

退出码: 0 成功; 1 外部验证结论为 "not reproduced"; 2 用法或数据错误
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from core.config import RunConfig, SynthSpec
from core.errors import ConfigError, SlacError
from core.file_handler import FileHandler
from core.numeric import configure_determinism
from core import pipeline

logger = logging.getLogger("slac_ts")

EXIT_OK, EXIT_NOT_REPRODUCED, EXIT_ERROR = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="运行配置 JSON")
    common.add_argument("--seed", type=int, help="随机种子(覆盖配置文件)")
    common.add_argument("--out", required=True, help="输出目录")
    common.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")

    parser = argparse.ArgumentParser(prog="slac-ts", description="不规则临床时间序列的自监督表征聚类")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="生成合成队列")
    synth.add_argument("--spec", required=True, help="合成参数 JSON")

    preprocess = commands.add_parser("preprocess", parents=[common], help="离群值剔除、分箱、标准化、插补")
    preprocess.add_argument("--input", help="原始队列目录(triplets.csv, static.csv, schema.json, ranges.json)")
    preprocess.add_argument("--triplets")
    preprocess.add_argument("--static")
    preprocess.add_argument("--schema")
    preprocess.add_argument("--ranges")
    preprocess.add_argument("--metadata")
    preprocess.add_argument("--stats-from", help="沿用另一个预处理目录的词表与标准化统计")

    pretrain = commands.add_parser("pretrain", parents=[common], help="预测任务预训练")
    pretrain.add_argument("--cohort", help="预处理目录")

    cluster = commands.add_parser("cluster", parents=[common], help="伪标签迭代聚类")
    cluster.add_argument("--cohort")
    cluster.add_argument("--weights", help="预训练权重前缀(默认 <out>/pretrain)")

    sweep = commands.add_parser("sweep", parents=[common], help="超参数网格扫描")
    sweep.add_argument("--cohort")
    sweep.add_argument("--grid", help="网格 JSON (缺省为默认网格)")
    sweep.add_argument("--workers", type=int, default=1)

    characterize = commands.add_parser("characterize", parents=[common], help="表型刻画")
    characterize.add_argument("--cohort")
    characterize.add_argument("--labels", required=True)
    characterize.add_argument("--compare", help="另一个预处理目录, 写入队列概要表")

    validate = commands.add_parser("validate", parents=[common], help="外部验证")
    validate.add_argument("--cohort")
    validate.add_argument("--labels", required=True)
    validate.add_argument("--external", required=True, help="外部队列的预处理目录")
    validate.add_argument("--weights", help="预训练权重前缀(默认 <out>/pretrain)")
    validate.add_argument("--random-baseline", action="store_true", help="同时训练随机初始化的对照分类器")

    pca = commands.add_parser("pca", parents=[common], help="表征的 PCA 投影")
    pca.add_argument("--cohort")
    pca.add_argument("--labels", required=True)
    pca.add_argument("--weights", help="聚类阶段权重前缀(默认 <out>/slac)")
    return parser


def load_run_config(args) -> RunConfig:
    """读取运行配置; --seed 覆盖文件中的种子, 两者都没有时报错"""
    raw = FileHandler.read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if "seed" not in raw:
        raise ConfigError("必须通过 --seed 或配置文件提供 seed")
    return RunConfig.from_dict(raw)


def cohort_dir(args, run: Optional[RunConfig] = None) -> str:
    if getattr(args, "cohort", None):
        return args.cohort
    if run is not None and run.paths.get("cohort"):
        return run.paths["cohort"]
    raise ConfigError("缺少 --cohort (或配置文件中的 paths.cohort)")


def dispatch(args) -> Dict:
    out = Path(args.out)
    if args.command == "synth":
        raw = FileHandler.read_json(args.spec)
        if args.seed is not None:
            raw["seed"] = args.seed
        return pipeline.run_synth(SynthSpec.from_dict(raw), out)
    if args.command == "preprocess":
        return pipeline.run_preprocess(args.input, out, stats_from=args.stats_from,
                                       triplets=args.triplets, static=args.static, schema=args.schema,
                                       ranges=args.ranges, metadata=args.metadata)
    if args.command == "characterize":
        return pipeline.run_characterize(cohort_dir(args), args.labels, out, compare_dir=args.compare)

    run = load_run_config(args)
    if not run.stage_enabled(args.command):
        logger.info("阶段 %s 在配置中被关闭", args.command)
        return {"stage": args.command, "skipped": True}
    if args.command == "pretrain":
        return pipeline.run_pretrain(run, cohort_dir(args, run), out)
    if args.command == "cluster":
        return pipeline.run_cluster(run, cohort_dir(args, run), out, weights=args.weights)
    if args.command == "sweep":
        return pipeline.run_sweep(run, cohort_dir(args, run), args.grid or run.paths.get("grid"),
                                  out, workers=args.workers)
    if args.command == "validate":
        return pipeline.run_validate(run, cohort_dir(args, run), args.labels, args.external, out,
                                     weights=args.weights, random_baseline=args.random_baseline)
    if args.command == "pca":
        return pipeline.run_pca(run, cohort_dir(args, run), args.labels, out, weights=args.weights)
    raise ConfigError(f"未知的子命令: {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    主函数 - 程序入口点

    返回:
        退出码
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        # argparse 对 --help 返回 0, 对未知参数返回 2
        return int(exit_request.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    configure_determinism()

    try:
        summary = dispatch(args)
    except (SlacError, OSError, ValueError, KeyError) as error:
        logger.error("%s 失败: %s", args.command, error)
        return EXIT_ERROR
    except Exception:
        # 退出码 1 只留给 "not reproduced"
        logger.exception("%s 意外失败", args.command)
        return EXIT_ERROR

    print(json.dumps(summary, sort_keys=True, ensure_ascii=False, default=str))
    if summary.get("verdict") == "not reproduced":
        return EXIT_NOT_REPRODUCED
    return EXIT_OK


# 当这个文件被直接运行时（不是被导入时），执行main函数
if __name__ == "__main__":
    sys.exit(main())
