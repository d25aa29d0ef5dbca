"""
分词服务
字节级BPE分词：加载GPT-2/StarCoder格式的词表与合并规则，编码、解码，以及token修复后缀计算
"""

import hashlib
import json
from bisect import bisect_left
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Dict, Tuple, Union, Iterable

import numpy as np
import regex
from loguru import logger

from app.core.exceptions import TokenizerFormatError, TokenizerIntegrityError
from app.models.tokens import HealingPlan, TokenSequence

GPT2_SPLIT_PATTERN = r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
# StarCoder在字节级切分前把数字逐个拆开
STARCODER_SPLIT_PATTERN = r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+|\p{N}| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""

SPLIT_PATTERNS = {
    "gpt2": GPT2_SPLIT_PATTERN,
    "starcoder": STARCODER_SPLIT_PATTERN,
}

VOCAB_FILE = "vocab.json"
MERGES_FILE = "merges.txt"


@lru_cache()
def bytes_to_unicode() -> Dict[int, str]:
    """字节到可打印字符的可逆映射（字节级BPE使用）"""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _to_bytes(text: Union[str, bytes]) -> bytes:
    if isinstance(text, str):
        return text.encode("utf-8")
    return bytes(text)


class TokenizerSpec:
    """不可变的BPE词表 + 合并规则，加载后可被多线程并发读取"""

    def __init__(self,
                 vocab: Dict[str, int],
                 merges: List[Tuple[str, str]],
                 style: str = "auto",
                 tokenizer_id: Optional[str] = None):
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {char: byte for byte, char in self.byte_encoder.items()}
        self.encoder = dict(vocab)
        self.merges = list(merges)
        self.bpe_ranks = {pair: rank for rank, pair in enumerate(self.merges)}

        if style == "auto":
            style = "starcoder" if "<fim_prefix>" in self.encoder else "gpt2"
        if style not in SPLIT_PATTERNS:
            raise TokenizerFormatError(f"未知的预切分风格: {style}")
        self.style = style
        self._pattern = regex.compile(SPLIT_PATTERNS[style])

        self._check_vocab()

        # 可由编码产生的token：单字节token和合并结果，其余为特殊token
        reachable = set(self.byte_encoder.values())
        reachable.update(left + right for left, right in self.merges)
        self.special_ids = frozenset(idx for token, idx in self.encoder.items() if token not in reachable)

        self._token_bytes: List[bytes] = [b""] * len(self.encoder)
        for token, idx in self.encoder.items():
            self._token_bytes[idx] = self._string_to_bytes(token)

        self._bytes_to_id: Dict[bytes, int] = {}
        for idx, data in enumerate(self._token_bytes):
            if data in self._bytes_to_id:
                raise TokenizerIntegrityError(
                    f"两个token对应相同的字节串: id {self._bytes_to_id[data]} 与 id {idx}"
                )
            self._bytes_to_id[data] = idx

        # 修复用的有序前缀表，加载时构建一次
        normal = sorted((data, idx) for idx, data in enumerate(self._token_bytes) if idx not in self.special_ids)
        self._sorted_bytes = [data for data, _ in normal]
        self._sorted_ids = [idx for _, idx in normal]
        self.max_token_bytes = max((len(data) for data in self._sorted_bytes), default=1)

        self.tokenizer_id = tokenizer_id or self._fingerprint()
        self._cache: Dict[str, Tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def _check_vocab(self) -> None:
        """校验词表：id连续、包含全部单字节token、合并结果存在"""
        ids = sorted(self.encoder.values())
        if ids != list(range(len(ids))):
            raise TokenizerIntegrityError("词表id必须连续覆盖 [0, |V|)")
        missing = [char for char in self.byte_encoder.values() if char not in self.encoder]
        if missing:
            raise TokenizerIntegrityError(f"词表缺少 {len(missing)} 个单字节token")
        for token in self.encoder:
            if not token:
                raise TokenizerIntegrityError("词表中存在空token")

    def _string_to_bytes(self, token: str) -> bytes:
        if all(char in self.byte_decoder for char in token):
            return bytes(self.byte_decoder[char] for char in token)
        return token.encode("utf-8")

    def _fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.encoder, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        for left, right in self.merges:
            digest.update(f"{left} {right}\n".encode("utf-8"))
        return digest.hexdigest()[:16]

    # ==================== 编码 / 解码 ====================

    def _bpe(self, word: str) -> Tuple[int, ...]:
        """对单个预切分片段应用合并规则"""
        cached = self._cache.get(word)
        if cached is not None:
            return cached

        parts = list(word)
        while len(parts) > 1:
            best = min(zip(parts, parts[1:]), key=lambda pair: self.bpe_ranks.get(pair, float("inf")))
            if best not in self.bpe_ranks:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged

        ids = tuple(self.encoder[part] for part in parts)
        if len(self._cache) < 100_000:
            self._cache[word] = ids
        return ids

    def encode(self, text: Union[str, bytes]) -> TokenSequence:
        """编码任意字节串，decode(encode(b)) == b"""
        data = _to_bytes(text)
        if not data:
            return []
        # surrogateescape 保证非法UTF-8字节也能无损往返
        string = data.decode("utf-8", errors="surrogateescape")
        ids: List[int] = []
        for piece in self._pattern.findall(string):
            piece_bytes = piece.encode("utf-8", errors="surrogateescape")
            ids.extend(self._bpe("".join(self.byte_encoder[b] for b in piece_bytes)))
        return ids

    def decode(self, ids: Iterable[int]) -> bytes:
        """解码为字节串"""
        chunks = []
        for idx in ids:
            if not 0 <= idx < len(self._token_bytes):
                raise ValueError(f"token id {idx} 超出词表范围 [0, {len(self._token_bytes)})")
            chunks.append(self._token_bytes[idx])
        return b"".join(chunks)

    def decode_text(self, ids: Iterable[int]) -> str:
        """解码为字符串（非法UTF-8用替换字符）"""
        return self.decode(ids).decode("utf-8", errors="replace")

    def token_bytes(self, idx: int) -> bytes:
        return self._token_bytes[idx]

    def token_id(self, data: bytes) -> Optional[int]:
        return self._bytes_to_id.get(data)

    # ==================== token修复 ====================

    def _extension_range(self, prefix: bytes) -> Tuple[int, int]:
        """有序表中以prefix开头的token区间"""
        start = bisect_left(self._sorted_bytes, prefix)
        # 上界：去掉末尾的0xff后把最后一个字节加一
        upper = prefix.rstrip(b"\xff")
        if not upper:
            return start, len(self._sorted_bytes)
        upper = upper[:-1] + bytes([upper[-1] + 1])
        return start, bisect_left(self._sorted_bytes, upper, lo=start)

    def is_strict_prefix(self, data: bytes) -> bool:
        """data是否为某个（非特殊）token的真前缀"""
        start = bisect_left(self._sorted_bytes, data)
        for i in (start, start + 1):
            if i < len(self._sorted_bytes):
                candidate = self._sorted_bytes[i]
                if candidate.startswith(data) and len(candidate) > len(data):
                    return True
        return False

    def compute_healing(self, text: Union[str, bytes]) -> HealingPlan:
        """查找并移除最长的、是某个token真前缀的后缀"""
        data = _to_bytes(text)
        limit = min(len(data), self.max_token_bytes - 1)
        pending = b""
        for length in range(limit, 0, -1):
            suffix = data[-length:]
            if self.is_strict_prefix(suffix):
                pending = suffix
                break

        if not pending:
            return HealingPlan.disabled(data)

        # 后缀可能跨越多个token，全部回退
        rolled_back = 0
        covered = 0
        for idx in reversed(self.encode(data)):
            if covered >= len(pending):
                break
            covered += len(self._token_bytes[idx])
            rolled_back += 1

        logger.debug(f"token修复: 后缀={pending!r}, 回退token数={rolled_back}")
        return HealingPlan(trimmed_input=data[:-len(pending)], pending=pending, rolled_back_tokens=rolled_back)

    def healing_candidates(self, remaining: bytes) -> np.ndarray:
        """约束解码的候选token：token是remaining的前缀，或remaining是token的前缀"""
        candidates = set()
        for length in range(1, min(len(remaining), self.max_token_bytes) + 1):
            idx = self._bytes_to_id.get(remaining[:length])
            if idx is not None and idx not in self.special_ids:
                candidates.add(idx)
        start, end = self._extension_range(remaining)
        candidates.update(self._sorted_ids[start:end])
        return np.asarray(sorted(candidates), dtype=np.int64)


# ==================== 文件加载 ====================

def _reject_duplicates(pairs):
    result = {}
    for key, value in pairs:
        if key in result:
            raise TokenizerIntegrityError(f"词表中存在重复token: {key!r}")
        result[key] = value
    return result


def _resolve_files(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    if path.is_dir():
        return path / VOCAB_FILE, path / MERGES_FILE
    return path, path.with_name(MERGES_FILE)


def load_tokenizer(path: Union[str, Path], style: str = "auto") -> TokenizerSpec:
    """加载 vocab.json + merges.txt（path可以是目录或vocab.json路径）"""
    vocab_path, merges_path = _resolve_files(path)
    if not vocab_path.exists():
        raise TokenizerFormatError(f"词表文件不存在: {vocab_path}")

    raw_vocab = vocab_path.read_bytes()
    try:
        vocab = json.loads(raw_vocab.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise TokenizerFormatError(f"词表解析失败: {vocab_path} 第{e.lineno}行第{e.colno}列: {e.msg}") from e
    except UnicodeDecodeError as e:
        raise TokenizerFormatError(f"词表不是UTF-8编码: {vocab_path} 偏移 {e.start}") from e
    if not isinstance(vocab, dict) or not all(isinstance(v, int) for v in vocab.values()):
        raise TokenizerFormatError(f"词表必须是 token → id 的JSON对象: {vocab_path}")

    raw_merges = merges_path.read_bytes() if merges_path.exists() else b""
    merges: List[Tuple[str, str]] = []
    seen = set()
    for line_no, line in enumerate(raw_merges.decode("utf-8").splitlines(), start=1):
        if line_no == 1 and line.startswith("#"):
            continue
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TokenizerFormatError(f"合并规则格式错误: {merges_path} 第{line_no}行: {line!r}")
        pair = (parts[0], parts[1])
        if pair in seen:
            raise TokenizerIntegrityError(f"重复的合并规则: {merges_path} 第{line_no}行")
        if parts[0] not in vocab or parts[1] not in vocab or parts[0] + parts[1] not in vocab:
            raise TokenizerIntegrityError(f"合并规则引用了词表外的token: {merges_path} 第{line_no}行")
        seen.add(pair)
        merges.append(pair)

    digest = hashlib.sha256(raw_vocab + b"\0" + raw_merges).hexdigest()[:16]
    spec = TokenizerSpec(vocab, merges, style=style, tokenizer_id=digest)
    logger.info(f"加载分词器成功: {vocab_path.parent}, |V|={spec.vocab_size}, 合并规则={len(merges)}, 风格={spec.style}")
    return spec


# 便捷函数
def encode(spec: TokenizerSpec, text: Union[str, bytes]) -> TokenSequence:
    """编码"""
    return spec.encode(text)


def decode(spec: TokenizerSpec, ids: Iterable[int]) -> bytes:
    """解码"""
    return spec.decode(ids)


def compute_healing(spec: TokenizerSpec, text: Union[str, bytes]) -> HealingPlan:
    """计算token修复计划"""
    return spec.compute_healing(text)
