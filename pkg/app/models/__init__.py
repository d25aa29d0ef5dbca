"""
数据模型包
导出所有数据模型
"""

from .tokens import TokenSequence, HealingPlan
from .chunk import ChunkRecord, RetrievedSnippet, RetrievalDatabase, DatabaseStats
from .decoding import StopReason, DecodeResult
from .prompt import AssembledPrompt, CompletionResult
from .evaluation import (EvalMode, RetrievalKind, EvalExample, PredictionPair, SingleTokenStats,
                         ConfidenceInterval, ExampleRecord, MetricsReport, SimilarityHistogram,
                         RunReport, SweepRow, SweepReport, ProjectInfo, EvalDataset,
                         BucketRow, ProjectRow, AnalysisReport)

__all__ = ["TokenSequence", "HealingPlan",
           "ChunkRecord", "RetrievedSnippet", "RetrievalDatabase", "DatabaseStats",
           "StopReason", "DecodeResult",
           "AssembledPrompt", "CompletionResult",
           "EvalMode", "RetrievalKind", "EvalExample", "PredictionPair", "SingleTokenStats",
           "ConfidenceInterval", "ExampleRecord", "MetricsReport", "SimilarityHistogram",
           "RunReport", "SweepRow", "SweepReport", "ProjectInfo", "EvalDataset",
           "BucketRow", "ProjectRow", "AnalysisReport"]
