"""
Core模块初始化文件
队列数据、预处理、聚类、统计检验与文件读写
"""

# 导入主要的类，方便其他模块使用
from .cohort import CohortDataset, EpisodeRecord, ObservationTriplet, StaticColumn
from .clustering import ClusterModel, ValidityScores, kmeans
from .file_handler import FileHandler
from .config import Config, ModelConfig, RunConfig, SynthSpec

# 定义包的版本信息
__version__ = "1.0.0"

# 定义当使用 from core import * 时导入的内容
__all__ = [
    'CohortDataset',       # 队列
    'EpisodeRecord',       # 受试者
    'ObservationTriplet',  # 观测三元组
    'StaticColumn',        # 静态列描述
    'ClusterModel',        # K-means 结果
    'ValidityScores',      # 聚类指标
    'kmeans',
    'FileHandler',         # 文件处理
    'Config',              # 配置
    'ModelConfig',
    'RunConfig',
    'SynthSpec',
]
