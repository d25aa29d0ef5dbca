"""
检索数据库数据模型
定义块记录（key块 + 续写块）、检索结果和项目级检索数据库
"""

from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any, Tuple

import numpy as np

from app.core.exceptions import TokenizerMismatchError


@dataclass(frozen=True)
class ChunkRecord:
    """检索数据库中的一条记录：key块及其后的续写块"""
    key_tokens: Tuple[int, ...]
    continuation_tokens: Tuple[int, ...]
    file_path: str                 # 项目内相对路径
    chunk_index: int               # 文件内序号
    key_token_set: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "key_tokens", tuple(self.key_tokens))
        object.__setattr__(self, "continuation_tokens", tuple(self.continuation_tokens))
        object.__setattr__(self, "key_token_set", frozenset(self.key_tokens))

    @property
    def sort_key(self) -> Tuple[str, int]:
        return self.file_path, self.chunk_index

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "file_path": self.file_path,
            "chunk_index": self.chunk_index,
            "key_tokens": list(self.key_tokens),
            "continuation_tokens": list(self.continuation_tokens),
        }


@dataclass(frozen=True)
class RetrievedSnippet:
    """检索结果：Jaccard检索时score为相似度，向量检索时score为平方L2距离"""
    record: ChunkRecord
    score: float
    rank: int                      # 从1开始
    jaccard: float = 0.0           # 与查询的Jaccard相似度（两种检索都记录）

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "file_path": self.record.file_path,
            "chunk_index": self.record.chunk_index,
            "rank": self.rank,
            "score": self.score,
            "jaccard": self.jaccard,
        }


class RetrievalDatabase:
    """项目级检索数据库，构建或加载后不可变"""

    def __init__(self,
                 records: List[ChunkRecord],
                 m: int,
                 tokenizer_id: str,
                 embeddings: Optional[np.ndarray] = None,
                 warnings: Optional[List[str]] = None,
                 source_bytes: int = 0):
        # 记录按 (file_path, chunk_index) 排序，排序位置即检索的平局顺序
        ordered = sorted(records, key=lambda r: r.sort_key)
        seen = set()
        for record in ordered:
            if record.sort_key in seen:
                raise ValueError(f"重复的块记录: {record.file_path}#{record.chunk_index}")
            seen.add(record.sort_key)

        if embeddings is not None:
            embeddings = np.asarray(embeddings, dtype=np.float32)
            if embeddings.ndim != 2 or embeddings.shape[0] != len(ordered):
                raise ValueError(
                    f"向量数量与记录数量不一致: {embeddings.shape} vs {len(ordered)}"
                )
            if len(records) and records != ordered:
                # 向量与传入顺序对齐，需要随记录一起重排
                order = sorted(range(len(records)), key=lambda i: records[i].sort_key)
                embeddings = embeddings[order]
            embeddings.setflags(write=False)

        self.records: Tuple[ChunkRecord, ...] = tuple(ordered)
        self.m = m
        self.tokenizer_id = tokenizer_id
        self.embeddings = embeddings
        self.warnings: Tuple[str, ...] = tuple(warnings or ())
        # 构建时读取的源文件字节数，不写入磁盘
        self.source_bytes = source_bytes
        self._file_ranges: Dict[str, Tuple[int, int]] = {}
        for idx, record in enumerate(self.records):
            start, _ = self._file_ranges.get(record.file_path, (idx, idx))
            self._file_ranges[record.file_path] = (start, idx + 1)
        self._postings = None
        self._set_sizes = None

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetrievalDatabase):
            return NotImplemented
        if (self.records, self.m, self.tokenizer_id) != (other.records, other.m, other.tokenizer_id):
            return False
        if self.embeddings is None or other.embeddings is None:
            return self.embeddings is None and other.embeddings is None
        return np.array_equal(self.embeddings, other.embeddings)

    @property
    def has_embeddings(self) -> bool:
        return self.embeddings is not None

    @property
    def files(self) -> List[str]:
        return list(self._file_ranges.keys())

    def file_range(self, file_path: Optional[str]) -> Tuple[int, int]:
        """返回文件记录在records中的区间，不存在时为空区间"""
        if file_path is None:
            return 0, 0
        return self._file_ranges.get(file_path, (0, 0))

    def file_records(self, file_path: str) -> List[ChunkRecord]:
        start, end = self.file_range(file_path)
        return list(self.records[start:end])

    def check_tokenizer(self, tokenizer_id: Optional[str]) -> None:
        """查询时校验分词器绑定"""
        if tokenizer_id is not None and tokenizer_id != self.tokenizer_id:
            raise TokenizerMismatchError(
                f"检索数据库绑定的分词器为 {self.tokenizer_id}，当前分词器为 {tokenizer_id}"
            )

    def postings(self) -> Dict[int, np.ndarray]:
        """token → 记录下标的倒排索引，首次查询时构建"""
        if self._postings is None:
            lists: Dict[int, List[int]] = {}
            for idx, record in enumerate(self.records):
                for token in record.key_token_set:
                    lists.setdefault(token, []).append(idx)
            # _postings最后赋值，其他线程看到它时_set_sizes已就绪
            self._set_sizes = np.asarray([len(r.key_token_set) for r in self.records], dtype=np.int64)
            self._postings = {token: np.asarray(ids, dtype=np.int64) for token, ids in lists.items()}
        return self._postings

    def set_sizes(self) -> np.ndarray:
        self.postings()
        return self._set_sizes

    def token_count(self) -> int:
        """所有key块的token总数"""
        return sum(len(record.key_tokens) for record in self.records)


@dataclass
class DatabaseStats:
    """检索数据库统计信息"""
    records: int = 0
    files: int = 0
    key_tokens: int = 0
    on_disk_bytes: Optional[int] = None
    skipped_files: int = 0
    bytes_per_token: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            "records": self.records,
            "files": self.files,
            "key_tokens": self.key_tokens,
            "on_disk_bytes": self.on_disk_bytes,
            "skipped_files": self.skipped_files,
            "bytes_per_token": self.bytes_per_token,
        }
