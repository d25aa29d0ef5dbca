"""
解码结果数据模型
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Dict, Any


class StopReason(Enum):
    """停止原因枚举"""
    NEWLINE = "newline"
    MAX_TOKENS = "max_tokens"
    HEALING_DEAD_END = "healing_dead_end"
    MODEL_ERROR = "model_error"


@dataclass
class DecodeResult:
    """贪心解码结果"""
    generated_tokens: List[int] = field(default_factory=list)
    generated_text: str = ""       # 去掉修复后缀、在换行处截断后的补全文本
    stop_reason: StopReason = StopReason.MAX_TOKENS
    per_step_ranks: Optional[List[int]] = None   # 单token评测时真实token的逐步排名
    healed_bytes: int = 0          # 约束解码阶段消耗的修复后缀字节数
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "generated_tokens": list(self.generated_tokens),
            "generated_text": self.generated_text,
            "stop_reason": self.stop_reason.value,
            "healed_bytes": self.healed_bytes,
            "error": self.error,
            "per_step_ranks": self.per_step_ranks,
        }
