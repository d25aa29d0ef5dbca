"""
评测数据模型
定义评测样本、指标统计、置信区间和运行报告的数据结构
"""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import List, Optional, Dict, Any


class EvalMode(Enum):
    """评测模式枚举"""
    LINE = "line"      # 补全整行
    LINE_R = "lineR"   # 从行内随机位置开始补全
    API = "api"        # 补全API调用（可能多行）
    API_R = "apiR"     # 从首行随机位置开始补全API调用

    def is_random(self) -> bool:
        return self in (EvalMode.LINE_R, EvalMode.API_R)

    def is_api(self) -> bool:
        return self in (EvalMode.API, EvalMode.API_R)


class RetrievalKind(Enum):
    """检索方式枚举"""
    NONE = "none"
    JACCARD = "jaccard"
    EMBEDDING = "embedding"


@dataclass(frozen=True)
class EvalExample:
    """评测样本：context_text · target · 剩余内容 还原文件"""
    example_id: str
    project_id: str
    file_path: str
    line_number: int               # 从1开始
    cut_offset: int = 0            # 行内开始补全的字符偏移，整行模式为0
    target: str = ""
    context_text: str = ""
    mode_hint: str = "line"

    @property
    def target_lines(self) -> int:
        return self.target.count("\n") + 1

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "example_id": self.example_id,
            "project_id": self.project_id,
            "file_path": self.file_path,
            "line_number": self.line_number,
            "cut_offset": self.cut_offset,
            "target": self.target,
            "mode_hint": self.mode_hint,
        }


@dataclass(frozen=True)
class PredictionPair:
    """预测与目标字符串，构造时去除首尾空白（仅一次）"""
    predicted: str
    target: str

    @classmethod
    def create(cls, predicted: str, target: str) -> "PredictionPair":
        return cls(predicted=predicted.strip(), target=target.strip())


@dataclass
class SingleTokenStats:
    """单token指标的逐位置统计"""
    log_probs: List[float] = field(default_factory=list)
    ranks: List[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.ranks)

    def extend(self, other: "SingleTokenStats") -> None:
        self.log_probs.extend(other.log_probs)
        self.ranks.extend(other.ranks)


@dataclass(frozen=True)
class ConfidenceInterval:
    """置信区间 point[lo, hi]"""
    point: float
    lo: float
    hi: float
    level: float = 0.95
    method: str = "BCa"
    resamples: int = 1000

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {"point": self.point, "lo": self.lo, "hi": self.hi}

    def format(self, digits: int = 3) -> str:
        return f"{self.point:.{digits}f} [{self.lo:.{digits}f}, {self.hi:.{digits}f}]"


@dataclass
class ExampleRecord:
    """单个样本的评测记录"""
    example_id: str
    project_id: str
    file_path: str
    target: str
    prediction: str = ""
    em: int = 0
    edit_sim: float = 0.0
    prefix_len: int = 0
    target_len: int = 0
    stop_reason: Optional[str] = None
    snippets: List[Dict[str, Any]] = field(default_factory=list)
    max_similarity: Optional[float] = None
    error: Optional[str] = None

    @property
    def prefix_sim(self) -> float:
        return self.prefix_len / self.target_len if self.target_len else 0.0

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "example_id": self.example_id,
            "project_id": self.project_id,
            "file_path": self.file_path,
            "target": self.target,
            "prediction": self.prediction,
            "em": self.em,
            "edit_sim": self.edit_sim,
            "prefix_len": self.prefix_len,
            "target_len": self.target_len,
            "stop_reason": self.stop_reason,
            "snippets": self.snippets,
            "max_similarity": self.max_similarity,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExampleRecord":
        """从字典创建实例"""
        return cls(
            example_id=data["example_id"],
            project_id=data.get("project_id", ""),
            file_path=data.get("file_path", ""),
            target=data.get("target", ""),
            prediction=data.get("prediction", ""),
            em=data.get("em", 0),
            edit_sim=data.get("edit_sim", 0.0),
            prefix_len=data.get("prefix_len", 0),
            target_len=data.get("target_len", 0),
            stop_reason=data.get("stop_reason"),
            snippets=data.get("snippets", []),
            max_similarity=data.get("max_similarity"),
            error=data.get("error"),
        )


@dataclass
class MetricsReport:
    """汇总指标报告"""
    dataset: str
    model_id: str
    n: int
    em: ConfidenceInterval
    edit_sim: ConfidenceInterval
    prefix_sim: ConfidenceInterval
    single_token: Optional[Dict[str, float]] = None
    per_example: List[ExampleRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "dataset": self.dataset,
            "model_id": self.model_id,
            "n": self.n,
            "em": self.em.to_dict(),
            "edit_sim": self.edit_sim.to_dict(),
            "prefix_sim": self.prefix_sim.to_dict(),
            "single_token": self.single_token,
            "per_example": [record.to_dict() for record in self.per_example],
        }


@dataclass
class SimilarityHistogram:
    """检索相似度分布（固定分桶边界）"""
    boundaries: List[float]
    counts: List[int]
    no_retrieval: int = 0          # 没有检索到片段的样本数

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "boundaries": self.boundaries,
            "counts": self.counts,
            "no_retrieval": self.no_retrieval,
        }


@dataclass
class RunReport:
    """评测运行报告"""
    config: Dict[str, Any]
    metrics: MetricsReport
    histogram: SimilarityHistogram
    failures: int = 0
    status: str = "ok"
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())

    @property
    def per_example(self) -> List[ExampleRecord]:
        return self.metrics.per_example

    def examples_with_snippets(self) -> int:
        return sum(1 for record in self.per_example if record.snippets)

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        data = {
            "created_at": self.created_at,
            "status": self.status,
            "failures": self.failures,
            "config": self.config,
            "histogram": self.histogram.to_dict(),
        }
        data.update(self.metrics.to_dict())
        return data


@dataclass
class SweepRow:
    """阈值扫描中的一行"""
    threshold: float
    report: RunReport
    improved: int = 0
    worsened: int = 0
    unchanged: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "threshold": self.threshold,
            "improved": self.improved,
            "worsened": self.worsened,
            "unchanged": self.unchanged,
            "examples_with_snippets": self.report.examples_with_snippets(),
            "report": self.report.to_dict(),
        }


@dataclass
class SweepReport:
    """相似度阈值扫描报告"""
    thresholds: List[float]
    rows: List[SweepRow]
    baseline: RunReport
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "created_at": self.created_at,
            "thresholds": self.thresholds,
            "baseline": self.baseline.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
        }


@dataclass(frozen=True)
class ProjectInfo:
    """数据集中的一个项目快照"""
    project_id: str
    root: Path
    overlap_flag: bool = False     # 与训练数据重叠的项目

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {"id": self.project_id, "root": str(self.root), "overlap_flag": self.overlap_flag}


@dataclass
class EvalDataset:
    """评测数据集：项目清单 + 样本"""
    name: str
    projects: Dict[str, ProjectInfo]
    examples: List[EvalExample]

    def __len__(self) -> int:
        return len(self.examples)

    def project_ids(self) -> List[str]:
        """样本实际用到的项目，按出现顺序"""
        return list(dict.fromkeys(example.project_id for example in self.examples))


@dataclass
class BucketRow:
    """相似度分桶分析中的一行"""
    lo: float
    hi: float
    count: int = 0
    mean_similarity: float = 0.0
    em: float = 0.0
    baseline_em: float = 0.0
    improved: float = 0.0          # 比例
    worsened: float = 0.0          # 比例

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
            "mean_similarity": self.mean_similarity,
            "em": self.em,
            "baseline_em": self.baseline_em,
            "improved": self.improved,
            "worsened": self.worsened,
        }


@dataclass
class ProjectRow:
    """按项目汇总的分析行"""
    project_id: str
    count: int
    mean_similarity: float
    em: float
    baseline_em: float

    @property
    def em_diff(self) -> float:
        return self.em - self.baseline_em

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "project_id": self.project_id,
            "count": self.count,
            "mean_similarity": self.mean_similarity,
            "em": self.em,
            "baseline_em": self.baseline_em,
            "em_diff": self.em_diff,
        }


@dataclass
class AnalysisReport:
    """检索报告与无检索基线的对比分析"""
    buckets: List[BucketRow]
    projects: List[ProjectRow]
    improved: int
    worsened: int
    unchanged: int
    spearman: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "buckets": [row.to_dict() for row in self.buckets],
            "projects": [row.to_dict() for row in self.projects],
            "improved": self.improved,
            "worsened": self.worsened,
            "unchanged": self.unchanged,
            "spearman": self.spearman,
        }
