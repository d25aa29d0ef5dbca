"""
提示词数据模型
定义组装后的提示词和单次补全结果
"""

from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any

from app.models.chunk import RetrievedSnippet
from app.models.decoding import DecodeResult
from app.models.tokens import HealingPlan


@dataclass
class AssembledPrompt:
    """组装后的提示词（检索片段 + 输入）"""
    tokens: List[int] = field(default_factory=list)
    snippets_used: List[RetrievedSnippet] = field(default_factory=list)
    input_tokens_kept: int = 0
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "prompt_tokens": len(self.tokens),
            "input_tokens_kept": self.input_tokens_kept,
            "truncated": self.truncated,
            "snippets": [snippet.to_dict() for snippet in self.snippets_used],
        }


@dataclass
class CompletionResult:
    """单次补全请求的结果"""
    file_path: Optional[str]
    prompt: AssembledPrompt
    healing: HealingPlan
    decode: DecodeResult
    retrieved: List[RetrievedSnippet] = field(default_factory=list)   # 阈值过滤前的检索结果

    @property
    def completion(self) -> str:
        return self.decode.generated_text

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        data = {
            "file_path": self.file_path,
            "completion": self.completion,
            "stop_reason": self.decode.stop_reason.value,
            "healing": self.healing.to_dict(),
        }
        data.update(self.prompt.to_dict())
        data["retrieved"] = [snippet.to_dict() for snippet in self.retrieved]
        return data
