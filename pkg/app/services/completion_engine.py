"""
补全引擎
单次补全流水线：token修复 → 构造查询 → 检索（同文件过滤、相似度阈值）→ 组装上下文 → 贪心解码
"""

from typing import List, Optional, Union

from loguru import logger

from app.core.config import RagConfig, settings
from app.core.exceptions import CursorError, DataError, VocabMismatchError
from app.models.chunk import RetrievalDatabase, RetrievedSnippet
from app.models.evaluation import RetrievalKind
from app.models.prompt import CompletionResult
from app.models.tokens import HealingPlan
from app.services.chunk_store import EmbeddingProvider, chunk_store_service
from app.services.context_builder import context_builder
from app.services.language_model import LanguageModel, decoding_service
from app.services.tokenizer_service import TokenizerSpec


def cursor_context(text: str, line: int, col: int) -> str:
    """光标之前的文件内容（line从1开始，col为行内字符偏移）

    只按换行符分行，与评测数据集的行号一致；换页符等其他行分隔字符不算换行
    """
    lines = text.split("\n")
    if not 1 <= line <= len(lines):
        raise CursorError(f"行号 {line} 超出文件范围 [1, {len(lines)}]")
    current = lines[line - 1].removesuffix("\r")
    if not 0 <= col <= len(current):
        raise CursorError(f"列号 {col} 超出第{line}行范围 [0, {len(current)}]")
    start = sum(len(previous) + 1 for previous in lines[:line - 1])
    return text[:start + col]


class CompletionEngine:
    """补全引擎：绑定分词器、语言模型和可选的向量提供者"""

    def __init__(self,
                 spec: TokenizerSpec,
                 model: LanguageModel,
                 provider: Optional[EmbeddingProvider] = None):
        if model.vocab_size != spec.vocab_size:
            raise VocabMismatchError(f"模型词表大小 {model.vocab_size} 与分词器 {spec.vocab_size} 不一致")
        self.spec = spec
        self.model = model
        self.provider = provider

    def retrieve(self,
                 input_tokens: List[int],
                 db: RetrievalDatabase,
                 rag: RagConfig,
                 retrieval: RetrievalKind,
                 exclude_file: Optional[str]) -> List[RetrievedSnippet]:
        """检索top-k片段，查询为空时跳过"""
        query = context_builder.build_query(input_tokens, rag.m)
        if not query:
            return []
        if retrieval == RetrievalKind.EMBEDDING:
            if self.provider is None:
                raise DataError("向量检索需要EmbeddingProvider")
            return chunk_store_service.retrieve_embedding(db, self.provider, query, rag.k, exclude_file,
                                                          self.spec.tokenizer_id)
        return chunk_store_service.retrieve_jaccard(db, query, rag.k, exclude_file, self.spec.tokenizer_id)

    def complete(self,
                 context: Union[str, bytes],
                 rag: RagConfig,
                 db: Optional[RetrievalDatabase] = None,
                 file_path: Optional[str] = None,
                 retrieval: RetrievalKind = RetrievalKind.JACCARD,
                 copying_allowed: bool = False,
                 similarity_threshold: Optional[float] = None,
                 healing: bool = True,
                 max_tokens: Optional[int] = None,
                 max_lines: int = 1,
                 retrieved: Optional[List[RetrievedSnippet]] = None) -> CompletionResult:
        """
        补全光标处的代码

        检索只在第一个token生成之前进行一次；copying_allowed为真时不过滤同文件片段。
        retrieved可传入已缓存的检索结果（阈值扫描复用）。
        """
        data = context.encode("utf-8") if isinstance(context, str) else bytes(context)
        plan = self.spec.compute_healing(data) if healing else HealingPlan.disabled(data)
        input_tokens = self.spec.encode(plan.trimmed_input)

        if retrieved is None:
            retrieved = []
            if db is not None and retrieval != RetrievalKind.NONE and rag.k > 0:
                exclude = None if copying_allowed else file_path
                retrieved = self.retrieve(input_tokens, db, rag, retrieval, exclude)

        used = retrieved
        if similarity_threshold is not None:
            used = [snippet for snippet in retrieved if snippet.jaccard >= similarity_threshold]

        prompt = context_builder.assemble(input_tokens, used, self.spec, rag)
        decode = decoding_service.greedy_complete(self.model, prompt, plan,
                                                  max_tokens or settings.MAX_TOKENS_LINE,
                                                  self.spec, max_lines)
        logger.debug(f"补全完成: 文件={file_path}, 片段={len(prompt.snippets_used)}/{len(retrieved)}, "
                     f"prompt={len(prompt)} token, 停止={decode.stop_reason.value}")
        return CompletionResult(file_path=file_path, prompt=prompt, healing=plan, decode=decode, retrieved=retrieved)
