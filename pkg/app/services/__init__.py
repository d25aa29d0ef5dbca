"""
服务模块
导出所有服务类
"""

from .tokenizer_service import TokenizerSpec, load_tokenizer
from .chunk_store import ChunkStoreService, chunk_store_service, EmbeddingProvider, HashingEmbeddingProvider
from .context_builder import ContextBuilder, context_builder
from .language_model import (LanguageModel, UniformOracle, CopyOracle, NgramOracle,
                             DecodingService, decoding_service, create_model)
from .metrics_service import MetricsService, metrics_service
from .completion_engine import CompletionEngine
from .eval_harness import EvalHarness, eval_harness

__all__ = ["TokenizerSpec", "load_tokenizer",
           "ChunkStoreService", "chunk_store_service", "EmbeddingProvider", "HashingEmbeddingProvider",
           "ContextBuilder", "context_builder",
           "LanguageModel", "UniformOracle", "CopyOracle", "NgramOracle",
           "DecodingService", "decoding_service", "create_model",
           "MetricsService", "metrics_service",
           "CompletionEngine",
           "EvalHarness", "eval_harness"]
