"""
异常定义 - 流水线中所有领域错误的统一层次
CLI 根据异常类型决定退出码
"""


class SlacError(Exception):
    """所有领域错误的基类"""


class CohortFormatError(SlacError, ValueError):
    """输入文件格式错误,尽量携带出错行号"""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)


class ConfigError(SlacError, ValueError):
    """配置或前置条件不满足"""


class ShapeMismatchError(SlacError, ValueError):
    """向量/张量宽度不一致"""


class NonFiniteError(SlacError, ArithmeticError):
    """出现 NaN 或 inf (梯度、损失)"""


class StaleArtifactError(SlacError):
    """上游产物与当前配置或词表不匹配"""


class EmptyEpisodeError(SlacError, ValueError):
    """受试者没有任何三元组, 无法编码"""


class IterationError(SlacError):
    """迭代流程中某一步失败, 携带迭代序号"""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"第 {iteration} 次迭代失败: {cause}")
