"""
检索数据库服务
按固定token数把项目文件切分为“key块 + 续写块”记录，并提供按Jaccard相似度或向量L2距离的top-k检索
"""

import os
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union, Iterable

import numpy as np
from loguru import logger

from app.core.config import settings
from app.core.exceptions import DataError
from app.models.chunk import ChunkRecord, RetrievedSnippet, RetrievalDatabase, DatabaseStats
from app.services.tokenizer_service import TokenizerSpec


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """J(Q, R) = |Q ∩ R| / |Q ∪ R|，基于去重后的token集合"""
    set_a, set_b = set(a), set(b)
    union = len(set_a | set_b)
    if union == 0:
        return 0.0
    return len(set_a & set_b) / union


class EmbeddingProvider(ABC):
    """块向量提供者（真实编码器位于本系统之外）"""

    dimension: int
    normalized: bool = False

    @abstractmethod
    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        """返回长度为dimension的实向量"""

    def embed_many(self, chunks: Iterable[Sequence[int]]) -> np.ndarray:
        rows = [self.embed(chunk) for chunk in chunks]
        if not rows:
            return np.zeros((0, self.dimension), dtype=np.float32)
        return np.vstack(rows).astype(np.float32)


class HashingEmbeddingProvider(EmbeddingProvider):
    """确定性的带符号特征哈希向量，用于测试和无编码器环境"""

    _MULTIPLIER = np.uint64(0x9E3779B97F4A7C15)

    def __init__(self, dimension: int = 256, normalized: bool = True, seed: int = 0):
        if dimension < 1:
            raise ValueError("向量维度必须为正整数")
        self.dimension = dimension
        self.normalized = normalized
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        vector = np.zeros(self.dimension, dtype=np.float64)
        if len(tokens):
            ids = np.asarray(tokens, dtype=np.uint64)
            with np.errstate(over="ignore"):
                hashed = ids * self._MULTIPLIER + self.seed
            buckets = (hashed % np.uint64(self.dimension)).astype(np.int64)
            signs = np.where((hashed >> np.uint64(63)) & np.uint64(1), 1.0, -1.0)
            np.add.at(vector, buckets, signs)
        if self.normalized:
            norm = np.linalg.norm(vector)
            if norm > 0:
                vector /= norm
        return vector.astype(np.float32)


class ChunkStoreService:
    """检索数据库服务类"""

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or settings.BUILD_WORKERS

    # ==================== 建库 ====================

    def list_source_files(self, project_root: Path, extensions: Sequence[str]) -> List[Path]:
        """列出项目内匹配扩展名的文件（跳过隐藏目录）"""
        files = []
        for path in project_root.rglob("*"):
            relative = path.relative_to(project_root)
            if any(part.startswith(".") for part in relative.parts):
                continue
            if path.is_file() and path.suffix in extensions:
                files.append(path)
        return sorted(files, key=lambda p: p.relative_to(project_root).as_posix())

    def chunk_tokens(self, tokens: Sequence[int], file_path: str, m: int) -> List[ChunkRecord]:
        """把一个文件的token序列切成不重叠的m-token块，续写为其后至多m个token"""
        records = []
        for chunk_index, start in enumerate(range(0, len(tokens), m)):
            records.append(ChunkRecord(
                key_tokens=tuple(tokens[start:start + m]),
                continuation_tokens=tuple(tokens[start + m:start + 2 * m]),
                file_path=file_path,
                chunk_index=chunk_index,
            ))
        return records

    def _chunk_file(self, path: Path, project_root: Path, spec: TokenizerSpec,
                    m: int) -> Tuple[List[ChunkRecord], Optional[str], int]:
        relative = path.relative_to(project_root).as_posix()
        try:
            data = path.read_bytes()
        except OSError as e:
            message = f"{relative}: {e}"
            logger.warning(f"跳过无法读取的文件: {message}")
            return [], message, 0
        return self.chunk_tokens(spec.encode(data), relative, m), None, len(data)

    def build_database(self,
                       project_root: Union[str, Path],
                       spec: TokenizerSpec,
                       m: int,
                       extensions: Optional[Sequence[str]] = None) -> RetrievalDatabase:
        """构建项目级检索数据库"""
        if m < 2:
            raise DataError(f"块大小m必须 >= 2，当前为 {m}")
        root = Path(project_root)
        if not root.is_dir():
            raise DataError(f"项目目录不可读: {project_root}")

        extensions = list(extensions or settings.SOURCE_EXTENSIONS)
        files = self.list_source_files(root, extensions)
        if not files:
            raise DataError(f"项目 {project_root} 中没有匹配 {extensions} 的文件")

        records: List[ChunkRecord] = []
        warnings: List[str] = []
        source_bytes = 0
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            for file_records, warning, size in executor.map(lambda p: self._chunk_file(p, root, spec, m), files):
                records.extend(file_records)
                source_bytes += size
                if warning:
                    warnings.append(warning)

        db = RetrievalDatabase(records, m=m, tokenizer_id=spec.tokenizer_id, warnings=warnings,
                               source_bytes=source_bytes)
        logger.info(f"检索数据库构建完成: {root}, 文件={len(files)}, 记录={len(db)}, 跳过={len(warnings)}")
        return db

    def attach_embeddings(self, db: RetrievalDatabase, provider: EmbeddingProvider) -> RetrievalDatabase:
        """为数据库的每个key块计算向量，返回新数据库"""
        embeddings = provider.embed_many(record.key_tokens for record in db.records)
        logger.info(f"计算块向量完成: 记录={len(db)}, 维度={provider.dimension}")
        return RetrievalDatabase(list(db.records), m=db.m, tokenizer_id=db.tokenizer_id,
                                 embeddings=embeddings, warnings=list(db.warnings), source_bytes=db.source_bytes)

    def database_stats(self, db: RetrievalDatabase, path: Optional[Union[str, Path]] = None) -> DatabaseStats:
        """数据库统计"""
        on_disk = os.path.getsize(path) if path and Path(path).exists() else None
        key_tokens = db.token_count()
        return DatabaseStats(
            records=len(db),
            files=len(db.files),
            key_tokens=key_tokens,
            on_disk_bytes=on_disk,
            skipped_files=len(db.warnings),
            bytes_per_token=db.source_bytes / key_tokens if db.source_bytes and key_tokens else None,
        )

    # ==================== 检索 ====================

    def _exclusion_mask(self, db: RetrievalDatabase, exclude_file: Optional[str]) -> np.ndarray:
        mask = np.ones(len(db), dtype=bool)
        start, end = db.file_range(exclude_file)
        mask[start:end] = False
        return mask

    def retrieve_jaccard(self,
                         db: RetrievalDatabase,
                         query: Sequence[int],
                         k: int,
                         exclude_file: Optional[str] = None,
                         tokenizer_id: Optional[str] = None) -> List[RetrievedSnippet]:
        """
        按Jaccard相似度检索top-k

        平局顺序：相似度高者优先，其次file_path字典序，再次chunk_index小者优先
        """
        if k <= 0:
            raise ValueError(f"k必须为正整数，当前为 {k}")
        if not len(query):
            raise ValueError("查询不能为空")
        db.check_tokenizer(tokenizer_id)
        if not len(db):
            return []

        query_set = np.unique(np.asarray(query, dtype=np.int64))
        postings = db.postings()
        hits = [postings[token] for token in query_set.tolist() if token in postings]

        # 倒排索引只给出与查询有交集的块
        intersection = (np.bincount(np.concatenate(hits), minlength=len(db))
                        if hits else np.zeros(len(db), dtype=np.int64))
        union = len(query_set) + db.set_sizes() - intersection
        scores = intersection / union

        mask = self._exclusion_mask(db, exclude_file)
        positive = np.flatnonzero((intersection > 0) & mask)
        ranked = positive[np.lexsort((positive, -scores[positive]))][:k].tolist()
        if len(ranked) < k:
            # 交集为空的块得分均为0，按记录顺序补足
            zero = np.flatnonzero((intersection == 0) & mask)[:k - len(ranked)]
            ranked.extend(zero.tolist())

        snippets = [
            RetrievedSnippet(record=db.records[idx], score=float(scores[idx]), rank=rank, jaccard=float(scores[idx]))
            for rank, idx in enumerate(ranked, start=1)
        ]
        logger.debug(f"Jaccard检索: |Q|={len(query_set)}, 候选={len(positive)}, 返回={len(snippets)}")
        return snippets

    def retrieve_embedding(self,
                           db: RetrievalDatabase,
                           provider: EmbeddingProvider,
                           query: Sequence[int],
                           k: int,
                           exclude_file: Optional[str] = None,
                           tokenizer_id: Optional[str] = None) -> List[RetrievedSnippet]:
        """按平方L2距离精确检索k近邻"""
        if k <= 0:
            raise ValueError(f"k必须为正整数，当前为 {k}")
        db.check_tokenizer(tokenizer_id)
        if not db.has_embeddings:
            raise DataError("检索数据库没有向量块，无法进行向量检索")
        if provider.dimension != db.embeddings.shape[1]:
            raise DataError(f"向量维度不一致: 提供者={provider.dimension}, 数据库={db.embeddings.shape[1]}")

        query_vector = np.asarray(provider.embed(query), dtype=np.float64)
        if query_vector.shape != (db.embeddings.shape[1],):
            raise DataError(f"查询向量维度不一致: {query_vector.shape}")

        diffs = db.embeddings.astype(np.float64) - query_vector
        distances = np.einsum("ij,ij->i", diffs, diffs)

        candidates = np.flatnonzero(self._exclusion_mask(db, exclude_file))
        ranked = candidates[np.argsort(distances[candidates], kind="stable")][:k]

        query_set = set(query)
        return [
            RetrievedSnippet(record=db.records[idx], score=float(distances[idx]), rank=rank,
                             jaccard=jaccard(query_set, db.records[idx].key_token_set))
            for rank, idx in enumerate(ranked.tolist(), start=1)
        ]


# 创建全局服务实例
chunk_store_service = ChunkStoreService()


# 便捷函数
def build_database(project_root: Union[str, Path], spec: TokenizerSpec, m: int,
                   extensions: Optional[Sequence[str]] = None) -> RetrievalDatabase:
    """构建检索数据库"""
    return chunk_store_service.build_database(project_root, spec, m, extensions)


def retrieve_jaccard(db: RetrievalDatabase, query: Sequence[int], k: int,
                     exclude_file: Optional[str] = None) -> List[RetrievedSnippet]:
    """Jaccard检索"""
    return chunk_store_service.retrieve_jaccard(db, query, k, exclude_file)


def retrieve_embedding(db: RetrievalDatabase, provider: EmbeddingProvider, query: Sequence[int], k: int,
                       exclude_file: Optional[str] = None) -> List[RetrievedSnippet]:
    """向量检索"""
    return chunk_store_service.retrieve_embedding(db, provider, query, k, exclude_file)
