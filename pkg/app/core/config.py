"""
配置文件
包含环境变量设置、检索增强配置（RagConfig）、引擎配置（EngineConfig）和评测配置（RunConfig）
"""

import json
from pathlib import Path
from typing import Optional, List, Dict, Any

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError
from app.models.evaluation import EvalMode, RetrievalKind


class Settings(BaseSettings):
    """应用配置类"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        # 允许从环境变量覆盖配置
        env_prefix="",
        extra="ignore",
    )

    # 应用基本设置
    APP_NAME: str = Field("检索增强代码补全引擎", description="应用名称")
    APP_VERSION: str = Field("1.0.0", description="应用版本")
    DEBUG: bool = Field(False, description="调试模式")

    # 日志设置
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    # 检索数据库设置
    SOURCE_EXTENSIONS: List[str] = [".py"]
    BUILD_WORKERS: int = Field(4, description="建库时并发分词的线程数")
    DEFAULT_CHUNK_SIZE: int = 64

    # 上下文组装设置
    DEFAULT_TOP_K: int = 1
    DEFAULT_CONTEXT_BUDGET: int = 384
    DEFAULT_RESERVE_FOR_INPUT: int = 192

    # 解码设置
    MAX_TOKENS_LINE: int = 128
    MAX_TOKENS_API: int = 512

    # 评测设置
    BOOTSTRAP_RESAMPLES: int = 1000
    CONFIDENCE_LEVEL: float = 0.95
    FAILURE_RATE_LIMIT: float = 0.10
    SIMILARITY_BUCKETS: int = 10

    # 外部模型连接设置
    MODEL_CONNECT_TIMEOUT: float = Field(10.0, description="模型服务连接超时时间（秒）")
    MODEL_SPARSE_TOP_J: int = Field(64, description="稀疏响应中请求的候选数量")


# 创建全局设置实例
settings = Settings()


class RagConfig(BaseModel):
    """检索增强上下文配置"""

    m: int = Field(default_factory=lambda: settings.DEFAULT_CHUNK_SIZE, description="查询长度（token数）")
    k: int = Field(default_factory=lambda: settings.DEFAULT_TOP_K, description="检索片段数量，0表示关闭检索")
    context_budget: int = Field(default_factory=lambda: settings.DEFAULT_CONTEXT_BUDGET)
    reserve_for_input: int = Field(default_factory=lambda: settings.DEFAULT_RESERVE_FOR_INPUT)
    include_metadata: bool = True
    include_continuation: bool = True
    dynamic_k: bool = False
    snippet_order: str = "best_first"

    @field_validator("snippet_order")
    @classmethod
    def _check_order(cls, value: str) -> str:
        if value not in ("best_first", "best_last"):
            raise ValueError(f"未知的片段顺序: {value}")
        return value

    @model_validator(mode="after")
    def _check_budget(self) -> "RagConfig":
        if self.m < 1:
            raise ValueError("查询长度m必须为正整数")
        if self.k < 0:
            raise ValueError("k不能为负数")
        if not 0 < self.reserve_for_input < self.context_budget:
            raise ValueError(
                f"reserve_for_input必须满足 0 < {self.reserve_for_input} < context_budget({self.context_budget})"
            )
        return self

    @classmethod
    def create(cls, **kwargs) -> "RagConfig":
        """带错误转换的构造函数"""
        try:
            return cls(**{key: value for key, value in kwargs.items() if value is not None})
        except ValidationError as e:
            raise ConfigError(f"检索配置无效: {e}") from e


class RunConfig(BaseModel):
    """评测运行配置"""

    mode: EvalMode = EvalMode.LINE
    retrieval: RetrievalKind = RetrievalKind.JACCARD
    copying_allowed: bool = False
    rag: RagConfig = Field(default_factory=RagConfig)
    seed: Optional[int] = None
    similarity_threshold: Optional[float] = None
    healing: bool = True
    single_token: bool = False
    exclude_overlap: bool = False
    max_tokens: Optional[int] = None

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        if self.mode.is_random() and self.seed is None:
            raise ValueError(f"{self.mode.value} 模式必须指定seed")
        if self.similarity_threshold is not None and self.similarity_threshold < 0:
            raise ValueError("相似度阈值不能为负数")
        return self

    @classmethod
    def create(cls, **kwargs) -> "RunConfig":
        """带错误转换的构造函数"""
        try:
            return cls(**{key: value for key, value in kwargs.items() if value is not None})
        except ValidationError as e:
            raise ConfigError(f"评测配置无效: {e}") from e

    def retrieval_enabled(self) -> bool:
        return self.retrieval != RetrievalKind.NONE and self.rag.k > 0

    def token_limit(self) -> int:
        """单个样本允许生成的最大token数"""
        if self.max_tokens is not None:
            return self.max_tokens
        return settings.MAX_TOKENS_API if self.mode.is_api() else settings.MAX_TOKENS_LINE

    def echo(self) -> Dict[str, Any]:
        """报告中回显的配置"""
        return self.model_dump(mode="json")


class EngineConfig(BaseModel):
    """引擎配置（配置文件的键与字段同名）"""

    tokenizer: Optional[str] = None
    chunk_size: int = Field(default_factory=lambda: settings.DEFAULT_CHUNK_SIZE)
    k: int = Field(default_factory=lambda: settings.DEFAULT_TOP_K)
    context_budget: int = Field(default_factory=lambda: settings.DEFAULT_CONTEXT_BUDGET)
    reserve_for_input: int = Field(default_factory=lambda: settings.DEFAULT_RESERVE_FOR_INPUT)
    include_metadata: bool = True
    include_continuation: bool = True
    dynamic_k: bool = False
    model: str = "copy"
    ngram_corpus: Optional[str] = None
    ngram_order: int = 4
    seed: Optional[int] = None
    extensions: List[str] = Field(default_factory=lambda: list(settings.SOURCE_EXTENSIONS))

    @field_validator("chunk_size")
    @classmethod
    def _check_chunk_size(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"块大小必须 >= 2，当前为 {value}")
        return value

    def rag_config(self) -> RagConfig:
        """根据引擎配置生成RagConfig"""
        return RagConfig.create(
            m=self.chunk_size,
            k=self.k,
            context_budget=self.context_budget,
            reserve_for_input=self.reserve_for_input,
            include_metadata=self.include_metadata,
            include_continuation=self.include_continuation,
            dynamic_k=self.dynamic_k,
        )

    def validate_paths(self) -> None:
        """校验配置中引用的文件是否存在"""
        if not self.tokenizer:
            raise ConfigError("未指定分词器路径（--tokenizer 或配置文件 tokenizer）")
        if not Path(self.tokenizer).exists():
            raise ConfigError(f"分词器路径不存在: {self.tokenizer}")
        if self.ngram_corpus and not Path(self.ngram_corpus).exists():
            raise ConfigError(f"n-gram语料目录不存在: {self.ngram_corpus}")


def load_engine_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> EngineConfig:
    """
    加载引擎配置

    优先级：命令行参数 > 配置文件 > 默认值
    """
    data: Dict[str, Any] = {}

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"配置文件不存在: {config_path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件解析失败: {config_path} 第{e.lineno}行第{e.colno}列: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"配置文件顶层必须是对象: {config_path}")

    # 仅覆盖显式给出的参数
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    try:
        return EngineConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"引擎配置无效: {e}") from e
