"""
异常定义
所有异常携带命令行退出码：1=用法错误，2=数据/校验错误，3=模型/传输错误
"""


class EngineError(Exception):
    """引擎异常基类"""

    exit_code: int = 2


class UsageError(EngineError):
    """命令行用法错误"""

    exit_code = 1


class DataError(EngineError):
    """数据或校验错误"""

    exit_code = 2


class ConfigError(DataError):
    """配置无效"""


class TokenizerFormatError(DataError):
    """词表或合并规则文件格式错误"""


class TokenizerIntegrityError(DataError):
    """词表完整性错误（重复token、id不连续等）"""


class TokenizerMismatchError(DataError):
    """检索数据库与分词器不匹配"""


class DatabaseFormatError(DataError):
    """检索数据库文件损坏或版本不匹配"""


class DatasetValidationError(DataError):
    """评测数据集校验失败"""

    def __init__(self, message: str, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class CursorError(DataError):
    """光标位置超出文件范围"""


class ModelError(EngineError):
    """语言模型调用失败"""

    exit_code = 3


class ModelConnectionError(ModelError):
    """模型服务连接失败"""


class ProtocolError(ModelError):
    """模型服务协议违例"""


class VocabMismatchError(ModelError):
    """模型词表大小与分词器不一致"""


class RunFailedError(ModelError):
    """评测运行中失败样本比例超过上限"""
