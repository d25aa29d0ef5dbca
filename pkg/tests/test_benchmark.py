import time

import numpy as np
import pytest

from app.models.chunk import ChunkRecord, RetrievalDatabase
from app.services.chunk_store import chunk_store_service

RECORDS = 100_000
M = 64
RETRIEVAL_BUDGET = 0.2     # 50ms × 4
BUILD_BUDGET = 40.0        # 10s × 4

pytestmark = pytest.mark.benchmark


@pytest.fixture(scope="module")
def large_database():
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 5000, size=(RECORDS, M))
    records = [
        ChunkRecord(key_tokens=tokens[i].tolist(), continuation_tokens=(), file_path=f"f{i // 50:05d}.py",
                    chunk_index=i % 50)
        for i in range(RECORDS)
    ]
    db = RetrievalDatabase(records, m=M, tokenizer_id="bench")
    db.postings()
    return db


def test_jaccard_retrieval_latency(large_database):
    query = np.random.default_rng(1).integers(0, 5000, size=M).tolist()
    chunk_store_service.retrieve_jaccard(large_database, query, 1)

    timings = []
    for _ in range(5):
        start = time.perf_counter()
        result = chunk_store_service.retrieve_jaccard(large_database, query, 4, exclude_file="f00001.py")
        timings.append(time.perf_counter() - start)
    assert len(result) == 4
    assert min(timings) < RETRIEVAL_BUDGET


def test_index_build_latency(tmp_path, toy_spec):
    body = "def f{n}(x):\n    y = x + {n}\n    return y\n\nresult = f{n}(1)\n"
    for n in range(1000):
        (tmp_path / f"mod{n:04d}.py").write_text(body.format(n=n), encoding="utf-8")

    start = time.perf_counter()
    db = chunk_store_service.build_database(tmp_path, toy_spec, M)
    elapsed = time.perf_counter() - start
    assert len(db.files) == 1000
    assert elapsed < BUILD_BUDGET
