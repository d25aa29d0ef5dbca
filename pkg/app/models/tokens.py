"""
分词相关数据模型
定义token序列类型和token修复（token healing）计划
"""

from dataclasses import dataclass
from typing import List, Dict, Any

# token id 序列，每个id都小于词表大小
TokenSequence = List[int]


@dataclass(frozen=True)
class HealingPlan:
    """token修复计划：输入 = trimmed_input · pending"""
    trimmed_input: bytes = b""
    pending: bytes = b""          # 被移除的后缀t，可能为空
    rolled_back_tokens: int = 0   # 原始分词结果中被回退的token数

    @property
    def original(self) -> bytes:
        return self.trimmed_input + self.pending

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "pending": self.pending.decode("utf-8", errors="replace"),
            "pending_bytes": len(self.pending),
            "rolled_back_tokens": self.rolled_back_tokens,
        }

    @classmethod
    def disabled(cls, text: bytes) -> "HealingPlan":
        """不做修复时的空计划"""
        return cls(trimmed_input=text, pending=b"", rolled_back_tokens=0)
