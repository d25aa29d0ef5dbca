"""
语言模型服务
定义自回归语言模型接口、贪心解码（含token修复约束与行尾停止）、单token评分，以及测试用的参考模型
"""

import math
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union, Iterable

import numpy as np
from loguru import logger
from scipy.special import logsumexp

from app.core.config import settings
from app.core.exceptions import ConfigError, ProtocolError, VocabMismatchError
from app.models.decoding import DecodeResult, StopReason
from app.models.evaluation import SingleTokenStats
from app.models.prompt import AssembledPrompt
from app.models.tokens import HealingPlan
from app.services.tokenizer_service import TokenizerSpec


class LanguageModel(ABC):
    """自回归语言模型：给定前缀返回下一个token的对数概率（或未归一化分数）"""

    model_id: str = "model"

    @property
    @abstractmethod
    def vocab_size(self) -> int:
        """词表大小|V|"""

    @abstractmethod
    def next_log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        """返回长度为|V|的向量"""

    def close(self) -> None:
        """释放资源"""


class UniformOracle(LanguageModel):
    """均匀分布：所有token的对数概率都是 -log|V|"""

    model_id = "uniform"

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("词表大小必须为正整数")
        self._vocab_size = vocab_size
        self._row = np.full(vocab_size, -math.log(vocab_size), dtype=np.float64)
        self._row.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def next_log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        return self._row.copy()


class CopyOracle(LanguageModel):
    """
    复制模型

    在前缀中查找当前后缀最长的更早出现位置（等长取最晚），预测其后的token；
    预测token概率0.9，其余token平分0.1，找不到匹配时退化为均匀分布
    """

    model_id = "copy"
    CONFIDENCE = 0.9

    def __init__(self, vocab_size: int):
        if vocab_size < 2:
            raise ValueError("复制模型要求词表大小 >= 2")
        self._vocab_size = vocab_size
        self._hit = math.log(self.CONFIDENCE)
        self._miss = math.log((1.0 - self.CONFIDENCE) / (vocab_size - 1))

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def predict(self, prefix: Sequence[int]) -> Optional[int]:
        """返回复制得到的下一个token，没有匹配时返回None"""
        arr = np.asarray(prefix, dtype=np.int64)
        n = len(arr)
        if n < 2:
            return None
        # candidates[i] 是某次更早出现的末位置，其后的token即为预测
        candidates = np.flatnonzero(arr[:-1] == arr[-1])
        length = 1
        while len(candidates):
            valid = candidates[candidates >= length]
            extended = valid[arr[valid - length] == arr[n - 1 - length]]
            if not len(extended):
                break
            candidates = extended
            length += 1
        if not len(candidates):
            return None
        return int(arr[candidates.max() + 1])

    def next_log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        predicted = self.predict(prefix)
        if predicted is None:
            return np.full(self._vocab_size, -math.log(self._vocab_size))
        row = np.full(self._vocab_size, self._miss)
        row[predicted] = self._hit
        return row


class NgramOracle(LanguageModel):
    """n-gram模型：stupid backoff + 当前前缀的n-gram缓存（使检索片段影响预测）"""

    model_id = "ngram"

    def __init__(self,
                 vocab_size: int,
                 corpus: Iterable[Sequence[int]] = (),
                 order: int = 4,
                 backoff: float = 0.4,
                 prompt_weight: float = 1.0):
        if order < 1:
            raise ValueError(f"n-gram阶数必须为正整数，当前为 {order}")
        self._vocab_size = vocab_size
        self.order = order
        self.backoff = backoff
        self.prompt_weight = prompt_weight

        # 每个上下文长度h一张表：上下文 → (下一个token ids, 计数)
        counters: List[Dict[Tuple[int, ...], Counter]] = [defaultdict(Counter) for _ in range(order)]
        sequences = 0
        for sequence in corpus:
            sequence = list(sequence)
            sequences += 1
            for i, token in enumerate(sequence):
                for h in range(order):
                    if i - h < 0:
                        break
                    counters[h][tuple(sequence[i - h:i])][token] += 1

        self._tables: List[Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]]] = []
        for counter in counters:
            table = {}
            for context, nexts in counter.items():
                ids = np.fromiter(nexts.keys(), dtype=np.int64, count=len(nexts))
                counts = np.fromiter(nexts.values(), dtype=np.float64, count=len(nexts))
                table[context] = (ids, counts)
            self._tables.append(table)
        logger.info(f"n-gram模型构建完成: 阶数={order}, 序列={sequences}, 上下文={sum(len(t) for t in self._tables)}")

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def _prompt_counts(self, arr: np.ndarray, h: int) -> np.ndarray:
        """前缀中紧跟在末尾h个token之后的token计数"""
        n = len(arr)
        if h == 0:
            return np.bincount(arr, minlength=self._vocab_size).astype(np.float64)
        if n <= h:
            return np.zeros(self._vocab_size)
        windows = np.lib.stride_tricks.sliding_window_view(arr, h + 1)
        matches = np.all(windows[:, :h] == arr[n - h:], axis=1)
        return np.bincount(windows[matches, h], minlength=self._vocab_size).astype(np.float64)

    def _level_counts(self, arr: np.ndarray, h: int) -> np.ndarray:
        counts = np.zeros(self._vocab_size)
        context = tuple(arr[len(arr) - h:].tolist()) if h else ()
        entry = self._tables[h].get(context)
        if entry is not None:
            ids, values = entry
            counts[ids] += values
        if self.prompt_weight:
            counts += self.prompt_weight * self._prompt_counts(arr, h)
        return counts

    def next_log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        arr = np.asarray(prefix, dtype=np.int64)

        unigram = self._level_counts(arr, 0)
        scores = (unigram + 1.0) / (unigram.sum() + self._vocab_size)
        for h in range(1, min(self.order, len(arr) + 1)):
            counts = self._level_counts(arr, h)
            total = counts.sum()
            if total <= 0:
                break
            scores = np.where(counts > 0, counts / total, self.backoff * scores)
        return np.log(scores)


# ==================== 解码 ====================

class DecodingService:
    """贪心解码服务"""

    def greedy_complete(self,
                        model: LanguageModel,
                        prompt: AssembledPrompt,
                        healing: HealingPlan,
                        max_tokens: int,
                        spec: TokenizerSpec,
                        max_lines: int = 1) -> DecodeResult:
        """
        贪心解码

        修复后缀未消耗完时，只在与剩余后缀兼容的token中取argmax；
        生成文本中出现第max_lines个换行时在换行处截断并停止
        """
        if max_tokens < 1:
            raise ValueError(f"max_tokens必须为正整数，当前为 {max_tokens}")
        if model.vocab_size != spec.vocab_size:
            raise VocabMismatchError(f"模型词表大小 {model.vocab_size} 与分词器 {spec.vocab_size} 不一致")

        context = list(prompt.tokens)
        pending = healing.pending
        generated: List[int] = []
        text = bytearray()
        healed = 0
        stop = StopReason.MAX_TOKENS
        error = None

        for _ in range(max_tokens):
            try:
                scores = np.asarray(model.next_log_probs(context), dtype=np.float64)
                if scores.shape != (spec.vocab_size,):
                    raise ProtocolError(f"模型返回的向量长度 {scores.shape} 与词表大小 {spec.vocab_size} 不一致")
            except Exception as e:
                logger.warning(f"模型调用失败，停止解码: {e}")
                stop = StopReason.MODEL_ERROR
                error = str(e)
                break

            if pending:
                candidates = spec.healing_candidates(pending)
                if not len(candidates):
                    stop = StopReason.HEALING_DEAD_END
                    break
                # argmax平局取最小id（候选已升序）
                token = int(candidates[np.argmax(scores[candidates])])
            else:
                token = int(np.argmax(scores))

            generated.append(token)
            context.append(token)
            data = spec.token_bytes(token)

            if pending:
                consumed = min(len(data), len(pending))
                healed += consumed
                visible = data[len(pending):]
                pending = pending[consumed:]
            else:
                visible = data

            text.extend(visible)
            if text.count(b"\n") >= max_lines:
                cut = -1
                for _ in range(max_lines):
                    cut = text.index(b"\n", cut + 1)
                del text[cut:]
                stop = StopReason.NEWLINE
                break

        return DecodeResult(
            generated_tokens=generated,
            generated_text=bytes(text).decode("utf-8", errors="replace"),
            stop_reason=stop,
            healed_bytes=healed,
            error=error,
        )

    def score_next_token(self, model: LanguageModel, prefix: Sequence[int], actual_next: int) -> Tuple[float, int]:
        """返回 (对数概率, 排名)，排名按概率降序、token id升序"""
        if not 0 <= actual_next < model.vocab_size:
            raise ValueError(f"token id {actual_next} 超出词表范围")
        scores = np.asarray(model.next_log_probs(prefix), dtype=np.float64)
        target = scores[actual_next]
        rank = 1 + int(np.count_nonzero(scores > target)) + int(np.count_nonzero(scores[:actual_next] == target))
        log_prob = float(target - logsumexp(scores))
        return log_prob, rank

    def score_sequence(self, model: LanguageModel, ids: Sequence[int], start: int = 1) -> SingleTokenStats:
        """以真实前缀为条件，给序列中从start开始的每个位置评分"""
        stats = SingleTokenStats()
        for i in range(max(start, 1), len(ids)):
            log_prob, rank = self.score_next_token(model, ids[:i], ids[i])
            stats.log_probs.append(log_prob)
            stats.ranks.append(rank)
        return stats


# 创建全局服务实例
decoding_service = DecodingService()


def _corpus_sequences(spec: TokenizerSpec, corpus: Union[str, Path], extensions: Sequence[str]) -> List[List[int]]:
    from app.services.chunk_store import chunk_store_service

    root = Path(corpus)
    if not root.is_dir():
        raise ConfigError(f"n-gram语料目录不存在: {corpus}")
    return [spec.encode(path.read_bytes()) for path in chunk_store_service.list_source_files(root, extensions)]


def create_model(name: str,
                 spec: TokenizerSpec,
                 corpus: Optional[Union[str, Path]] = None,
                 order: int = 4,
                 extensions: Sequence[str] = (".py",),
                 top_j: Optional[int] = None) -> LanguageModel:
    """
    按名称创建模型：copy / uniform / ngram / ws://地址

    top_j只作用于外部模型：None时使用MODEL_SPARSE_TOP_J，0表示请求稠密向量
    """
    if name.startswith(("ws://", "wss://")):
        from app.services.model_client import external_model_connect

        top_j = settings.MODEL_SPARSE_TOP_J if top_j is None else top_j
        return external_model_connect(name, spec.vocab_size, spec.tokenizer_id, top_j=top_j or None)
    if name == "copy":
        return CopyOracle(spec.vocab_size)
    if name == "uniform":
        return UniformOracle(spec.vocab_size)
    if name == "ngram":
        sequences = _corpus_sequences(spec, corpus, extensions) if corpus else []
        return NgramOracle(spec.vocab_size, sequences, order=order)
    raise ConfigError(f"未知的模型: {name}（可选 copy / uniform / ngram / ws://host:port）")


# 便捷函数
def greedy_complete(model: LanguageModel, prompt: AssembledPrompt, healing: HealingPlan, max_tokens: int,
                    spec: TokenizerSpec, max_lines: int = 1) -> DecodeResult:
    """贪心补全"""
    return decoding_service.greedy_complete(model, prompt, healing, max_tokens, spec, max_lines)


def score_next_token(model: LanguageModel, prefix: Sequence[int], actual_next: int) -> Tuple[float, int]:
    """单token评分"""
    return decoding_service.score_next_token(model, prefix, actual_next)


def score_sequence(model: LanguageModel, ids: Sequence[int], start: int = 1) -> SingleTokenStats:
    """序列评分"""
    return decoding_service.score_sequence(model, ids, start)
