"""
上下文组装服务
从输入末尾构造检索查询，把检索片段（带文件元信息）拼在输入之前，并裁剪到模型的token预算内
"""

from typing import List, Sequence, Tuple

from loguru import logger

from app.core.config import RagConfig
from app.core.exceptions import ConfigError
from app.models.chunk import RetrievedSnippet
from app.models.prompt import AssembledPrompt
from app.models.tokens import TokenSequence
from app.services.tokenizer_service import TokenizerSpec


class ContextBuilder:
    """上下文组装器（纯函数，无内部状态）"""

    def build_query(self, context_tokens: Sequence[int], m: int) -> TokenSequence:
        """取输入末尾的 min(m, len) 个token作为查询"""
        if m < 1:
            raise ValueError(f"查询长度m必须为正整数，当前为 {m}")
        return list(context_tokens[-m:]) if context_tokens else []

    def format_snippet(self, snippet: RetrievedSnippet, spec: TokenizerSpec, cfg: RagConfig) -> TokenSequence:
        """片段格式：[# 路径\\n] · N · [F] · \\n"""
        tokens: TokenSequence = []
        if cfg.include_metadata:
            tokens.extend(spec.encode(f"# {snippet.record.file_path}\n"))
        tokens.extend(snippet.record.key_tokens)
        if cfg.include_continuation:
            tokens.extend(snippet.record.continuation_tokens)
        tokens.extend(spec.encode("\n"))
        return tokens

    def _fit_snippets(self,
                      formatted: List[Tuple[RetrievedSnippet, TokenSequence]],
                      room: int) -> List[Tuple[RetrievedSnippet, TokenSequence]]:
        # 整段丢弃，从排名最差的开始
        kept = list(formatted)
        while kept and sum(len(tokens) for _, tokens in kept) > room:
            kept.pop()
        return kept

    def assemble(self,
                 context_tokens: Sequence[int],
                 snippets: Sequence[RetrievedSnippet],
                 spec: TokenizerSpec,
                 cfg: RagConfig) -> AssembledPrompt:
        """
        组装提示词：检索片段在前，输入在后

        片段按排名从好到差丢弃，直到 片段总长 + min(len(x), reserve_for_input) <= context_budget；
        输入从前面截断，保留 budget - 片段总长 个token（不少于reserve_for_input）。
        dynamic_k开启时输入完整保留，片段只使用剩余空间。
        """
        budget = cfg.context_budget
        reserve = cfg.reserve_for_input
        if not 0 < reserve < budget:
            raise ConfigError(f"reserve_for_input必须满足 0 < {reserve} < context_budget({budget})")

        ranked = sorted(snippets, key=lambda snippet: snippet.rank)[:cfg.k]
        formatted = [(snippet, self.format_snippet(snippet, spec, cfg)) for snippet in ranked]

        input_len = len(context_tokens)
        if cfg.dynamic_k:
            kept = self._fit_snippets(formatted, budget - min(input_len, budget))
        else:
            kept = self._fit_snippets(formatted, budget - min(input_len, reserve))

        snippet_tokens = sum(len(tokens) for _, tokens in kept)
        input_kept = min(input_len, budget - snippet_tokens)

        if cfg.snippet_order == "best_last":
            kept = list(reversed(kept))

        tokens: TokenSequence = []
        for _, snippet_block in kept:
            tokens.extend(snippet_block)
        if input_kept:
            tokens.extend(context_tokens[input_len - input_kept:])

        dropped = len(formatted) - len(kept)
        truncated = input_kept < input_len or dropped > 0
        if truncated:
            logger.debug(f"上下文裁剪: 输入 {input_len}→{input_kept} token, 丢弃片段 {dropped} 个")

        return AssembledPrompt(
            tokens=tokens,
            snippets_used=[snippet for snippet, _ in kept],
            input_tokens_kept=input_kept,
            truncated=truncated,
        )


# 创建全局服务实例
context_builder = ContextBuilder()


# 便捷函数
def build_query(context_tokens: Sequence[int], m: int) -> TokenSequence:
    """构造检索查询"""
    return context_builder.build_query(context_tokens, m)


def format_snippet(snippet: RetrievedSnippet, spec: TokenizerSpec, cfg: RagConfig) -> TokenSequence:
    """格式化检索片段"""
    return context_builder.format_snippet(snippet, spec, cfg)


def assemble(context_tokens: Sequence[int], snippets: Sequence[RetrievedSnippet],
             spec: TokenizerSpec, cfg: RagConfig) -> AssembledPrompt:
    """组装提示词"""
    return context_builder.assemble(context_tokens, snippets, spec, cfg)
