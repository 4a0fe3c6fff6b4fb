"""
文件处理模块 - 负责所有产物的读写
队列 CSV、模式/范围 JSON、标签与表格 CSV、权重清单 + 二进制
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.cohort import (ClinicalRangeTable, CohortDataset, EpisodeRecord,
                         ObservationTriplet, StaticColumn, one_hot_static)
from core.config import Config
from core.errors import CohortFormatError, StaleArtifactError

logger = logging.getLogger(__name__)

TRIPLET_HEADER = ["episode_id", "time_hours", "feature", "value"]


def _fmt(value: float) -> str:
    """浮点数写成可逐位还原的最短表示"""
    return repr(float(value))


def _read_text_table(source, what: str) -> pd.DataFrame:
    """
    以字符串方式读取 CSV, 解析错误转换为带行号的 CohortFormatError

    空行不参与解析但保留行号: 返回表的 index + 2 就是该行在文件中的行号
    """
    try:
        table = pd.read_csv(source, dtype=str, keep_default_na=False, na_filter=False,
                            skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except pd.errors.ParserError as error:
        match = re.search(r"line (\d+)", str(error))
        raise CohortFormatError(f"{what} 格式错误: {error}",
                                int(match.group(1)) if match else None) from None
    blank = (table.isna() | table.eq("")).all(axis=1)
    return table[~blank].fillna("")


class FileHandler:
    """文件输入输出处理类"""

    # === 队列 ===

    @staticmethod
    def parse_cohort(triplet_file, static_file,
                     schema: Optional[Sequence[StaticColumn]] = None,
                     metadata_file=None,
                     feature_vocab: Optional[Sequence[str]] = None) -> CohortDataset:
        """
        解析三元组 CSV 与静态 CSV, 组装队列

        参数:
            triplet_file: 文本流或路径, 表头 episode_id,time_hours,feature,value
            static_file: 文本流或路径, 表头 episode_id,<列1>,...; 空单元格为缺失
            schema: 静态列描述; None 时所有静态列按数值处理
            metadata_file: 可选元数据 CSV
            feature_vocab: 指定词表(加载预处理后的队列时使用); 默认取观测到的特征名排序

        返回:
            CohortDataset
        """
        triplet_rows = FileHandler._parse_triplet_rows(triplet_file)
        static_ids, static_rows, static_header = FileHandler._parse_static_rows(static_file)

        if schema is None:
            schema = [StaticColumn(name) for name in static_header]
        declared = {c.name for c in schema}
        undeclared = [name for name in static_header if name not in declared]
        if undeclared:
            raise CohortFormatError(f"静态列未在模式中声明: {undeclared}", 1)

        observed = sorted({name for _, _, name, _ in triplet_rows})
        if feature_vocab is None:
            feature_vocab = observed
        else:
            unknown = sorted(set(observed) - set(feature_vocab))
            if unknown:
                raise CohortFormatError(f"三元组中出现词表之外的特征: {unknown}")
        index = {name: i for i, name in enumerate(feature_vocab)}

        grouped: Dict[str, List[ObservationTriplet]] = {}
        for episode_id, time, name, value in triplet_rows:
            grouped.setdefault(episode_id, []).append(ObservationTriplet(time, index[name], value))

        known = set(static_ids)
        order = list(static_ids) + [i for i in grouped if i not in known]
        only_triplets = len(order) - len(static_ids)
        if only_triplets:
            logger.warning("%d 个受试者没有静态行, 静态特征按缺失处理", only_triplets)

        raw_lookup = dict(zip(static_ids, static_rows))
        matrix = one_hot_static([raw_lookup.get(i, {}) for i in order], schema)

        metadata = FileHandler._parse_metadata(metadata_file) if metadata_file is not None else {}

        episodes = [EpisodeRecord(episode_id=eid,
                                  static_vector=matrix[k].copy(),
                                  triplets=grouped.get(eid, []),
                                  metadata=dict(metadata.get(eid, {})))
                    for k, eid in enumerate(order)]
        static_columns = [name for col in schema for name in col.expanded_names()]
        cohort = CohortDataset(episodes=episodes,
                               feature_vocab=list(feature_vocab),
                               static_schema=list(schema),
                               static_columns=static_columns)
        logger.info("成功读取队列: N=%d, |F|=%d, 三元组 %d 个",
                    len(episodes), len(feature_vocab), len(triplet_rows))
        return cohort

    @staticmethod
    def _parse_triplet_rows(source) -> List[Tuple[str, float, str, float]]:
        table = _read_text_table(source, "三元组文件")
        if table.empty and not len(table.columns):
            return []
        if list(table.columns) != TRIPLET_HEADER:
            raise CohortFormatError(f"三元组文件表头应为 {','.join(TRIPLET_HEADER)}", 1)

        rows = []
        for index, episode_id, time_text, feature, value_text in table.itertuples(name=None):
            line = index + 2
            if not episode_id or not feature:
                raise CohortFormatError("episode_id 或 feature 为空", line)
            try:
                time, value = float(time_text), float(value_text)
            except ValueError:
                raise CohortFormatError(
                    f"无法解析数值 time_hours='{time_text}', value='{value_text}'", line) from None
            if not (math.isfinite(time) and math.isfinite(value)):
                raise CohortFormatError("time_hours 或 value 不是有限值", line)
            if time < 0:
                raise CohortFormatError(f"time_hours 不能为负: {time}", line)
            rows.append((episode_id, time, feature, value))
        return rows

    @staticmethod
    def _parse_static_rows(source) -> Tuple[List[str], List[Dict[str, str]], List[str]]:
        table = _read_text_table(source, "静态文件")
        if not len(table.columns):
            return [], [], []
        if table.columns[0] != "episode_id":
            raise CohortFormatError("静态文件第一列必须是 episode_id", 1)
        header = list(table.columns[1:])

        ids, rows, seen = [], [], set()
        for index, record in zip(table.index, table.to_dict(orient="records")):
            line = index + 2
            episode_id = record.pop("episode_id")
            if not episode_id:
                raise CohortFormatError("episode_id 为空", line)
            if episode_id in seen:
                raise CohortFormatError(f"重复的静态行: {episode_id}", line)
            seen.add(episode_id)
            ids.append(episode_id)
            rows.append(record)
        return ids, rows, header

    @staticmethod
    def _parse_metadata(source) -> Dict[str, Dict[str, object]]:
        table = _read_text_table(source, "元数据文件")
        metadata = {}
        for record in table.to_dict(orient="records"):
            episode_id = record.pop("episode_id")
            parsed = {}
            for key, text in record.items():
                if text == "":
                    continue
                try:
                    parsed[key] = float(text)
                except ValueError:
                    parsed[key] = text
            metadata[episode_id] = parsed
        return metadata

    @staticmethod
    def write_cohort(cohort: CohortDataset, out_dir, prefix: str = "") -> Dict[str, Path]:
        """
        把队列写成与解析器相同的格式

        类别槽位按模式还原为类别名(全0写空), 数值 NaN 写空
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {name: out_dir / f"{prefix}{name}.csv" for name in ("triplets", "static", "metadata")}

        triplet_records = [(e.episode_id, _fmt(t.time), cohort.feature_vocab[t.feature], _fmt(t.value))
                           for e in cohort.episodes for t in e.triplets]
        pd.DataFrame(triplet_records, columns=TRIPLET_HEADER).to_csv(paths["triplets"], index=False)

        static_header = ["episode_id"] + [c.name for c in cohort.static_schema]
        static_records = [[e.episode_id] + FileHandler._static_cells(e.static_vector, cohort.static_schema)
                          for e in cohort.episodes]
        pd.DataFrame(static_records, columns=static_header).to_csv(paths["static"], index=False)

        keys = sorted({k for e in cohort.episodes for k in e.metadata})
        if keys:
            meta_records = [[e.episode_id] + [_meta_cell(e.metadata.get(k)) for k in keys]
                            for e in cohort.episodes]
            pd.DataFrame(meta_records, columns=["episode_id"] + keys).to_csv(paths["metadata"], index=False)
        else:
            paths.pop("metadata")
        return paths

    @staticmethod
    def _static_cells(vector: np.ndarray, schema: Sequence[StaticColumn]) -> List[str]:
        cells, offset = [], 0
        for col in schema:
            block = vector[offset:offset + col.width]
            if col.kind == "categorical":
                hot = np.flatnonzero(block > 0.5)
                cells.append(col.categories[hot[0]] if len(hot) else "")
            else:
                cells.append("" if np.isnan(block[0]) else _fmt(block[0]))
            offset += col.width
        return cells

    @staticmethod
    def write_processed_cohort(cohort: CohortDataset, out_dir, extra: Optional[Dict] = None) -> Path:
        """写出预处理后的队列以及 cohort.json (词表、模式、标准化统计)"""
        out_dir = Path(out_dir)
        FileHandler.write_cohort(cohort, out_dir)
        description = {
            "feature_vocab": cohort.feature_vocab,
            "static_schema": FileHandler.schema_to_dict(cohort.static_schema),
            "normalization_stats": {k: list(v) for k, v in cohort.normalization_stats.items()},
            "static_stats": {k: list(v) for k, v in cohort.static_stats.items()},
            "clip_report": cohort.clip_report,
            "impute_reference": _matrix_to_json(cohort.impute_reference),
        }
        description.update(extra or {})
        path = out_dir / Config.COHORT_FILE
        FileHandler.write_json(path, description)
        return path

    @staticmethod
    def load_processed_cohort(cohort_dir) -> Tuple[CohortDataset, Dict]:
        """读取 write_processed_cohort 写出的目录"""
        cohort_dir = Path(cohort_dir)
        description = FileHandler.read_json(cohort_dir / Config.COHORT_FILE)
        schema = FileHandler.schema_from_dict(description["static_schema"])
        metadata = cohort_dir / Config.METADATA_FILE
        cohort = FileHandler.parse_cohort(cohort_dir / Config.TRIPLET_FILE,
                                          cohort_dir / Config.STATIC_FILE,
                                          schema=schema,
                                          metadata_file=metadata if metadata.exists() else None,
                                          feature_vocab=description["feature_vocab"])
        cohort.normalization_stats = {k: tuple(v) for k, v in description["normalization_stats"].items()}
        cohort.static_stats = {k: tuple(v) for k, v in description["static_stats"].items()}
        cohort.clip_report = dict(description.get("clip_report", {}))
        if description.get("impute_reference") is not None:
            cohort.impute_reference = np.array(description["impute_reference"], dtype=np.float64)
        return cohort, description

    # === 模式与范围 ===

    @staticmethod
    def schema_from_dict(raw: Dict) -> List[StaticColumn]:
        columns = []
        for name, spec in raw.items():
            kind = spec.get("kind", "numeric")
            columns.append(StaticColumn(name, kind, tuple(spec.get("categories", ()))))
        return columns

    @staticmethod
    def schema_to_dict(schema: Sequence[StaticColumn]) -> Dict:
        result = {}
        for col in schema:
            entry = {"kind": col.kind}
            if col.kind == "categorical":
                entry["categories"] = list(col.categories)
            result[col.name] = entry
        return result

    @staticmethod
    def read_schema(path) -> List[StaticColumn]:
        return FileHandler.schema_from_dict(FileHandler.read_json(path))

    @staticmethod
    def read_ranges(path) -> ClinicalRangeTable:
        return ClinicalRangeTable(FileHandler.read_json(path))

    # === 通用 JSON / CSV ===

    @staticmethod
    def read_json(path) -> Dict:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)

    @staticmethod
    def write_json(path, payload) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as file:
            json.dump(payload, file, indent=2, sort_keys=True, ensure_ascii=False)
            file.write("\n")
        return path

    @staticmethod
    def write_table(path, records: Sequence[Sequence], columns: Sequence[str]) -> Path:
        """浮点列统一用最短还原表示, None 写空"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cells = [[_table_cell(v) for v in row] for row in records]
        pd.DataFrame(cells, columns=list(columns)).to_csv(path, index=False)
        return path

    @staticmethod
    def write_labels(path, episode_ids: Sequence[str], labels: Sequence[int]) -> Path:
        return FileHandler.write_table(path, list(zip(episode_ids, (int(l) for l in labels))),
                                       ["episode_id", "cluster"])

    @staticmethod
    def read_labels(path) -> Dict[str, int]:
        table = _read_text_table(path, "标签文件")
        if list(table.columns) != ["episode_id", "cluster"]:
            raise CohortFormatError("标签文件表头应为 episode_id,cluster", 1)
        return {eid: int(c) for eid, c in table.itertuples(index=False, name=None)}

    # === 权重持久化 ===

    @staticmethod
    def save_weights(prefix, tensors: Dict[str, np.ndarray], meta: Dict) -> Tuple[Path, Path]:
        """
        权重写为清单(JSON)加小端64位浮点二进制

        清单记录每个张量的名称、形状、字节偏移, 以及种子、配置哈希、词表哈希
        """
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        entries, offset, chunks = [], 0, []
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f8")
            chunks.append(array.tobytes())
            entries.append({"name": name, "shape": list(array.shape), "offset": offset})
            offset += array.nbytes
        blob_path = prefix.with_suffix(".bin")
        manifest_path = prefix.with_suffix(".json")
        with open(blob_path, "wb") as file:
            file.write(b"".join(chunks))
        FileHandler.write_json(manifest_path, dict(meta, tensors=entries, blob=blob_path.name))
        logger.info("成功写入权重 %s (%d 个张量)", manifest_path, len(entries))
        return manifest_path, blob_path

    @staticmethod
    def load_weights(prefix, expect: Optional[Dict] = None) -> Tuple[Dict[str, np.ndarray], Dict]:
        """
        读取权重; expect 中的每个键必须与清单一致, 否则视为过期权重
        """
        prefix = Path(prefix)
        manifest = FileHandler.read_json(prefix.with_suffix(".json"))
        for key, value in (expect or {}).items():
            if manifest.get(key) != value:
                raise StaleArtifactError(
                    f"权重 {prefix} 的 {key} 不匹配: 清单为 {manifest.get(key)!r}, 当前为 {value!r}")
        blob = (prefix.parent / manifest["blob"]).read_bytes()
        tensors = {}
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            array = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
            tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float64)
        return tensors, manifest


def _matrix_to_json(matrix: Optional[np.ndarray]):
    """NaN 写成 null"""
    if matrix is None:
        return None
    return [[None if np.isnan(v) else float(v) for v in row] for row in np.asarray(matrix, dtype=np.float64)]


def _meta_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return _fmt(value)
    return str(value)


def _table_cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else _fmt(value)
    if isinstance(value, np.integer):
        return int(value)
    return value
