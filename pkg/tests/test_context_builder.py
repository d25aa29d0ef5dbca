import pytest

from app.core.config import RagConfig
from app.models.chunk import ChunkRecord, RetrievedSnippet
from app.services.context_builder import context_builder


def _snippet(rank: int, key_len: int, path: str = "lib/util.py", continuation=()) -> RetrievedSnippet:
    record = ChunkRecord(tuple(range(100 + rank, 100 + rank + key_len)), tuple(continuation), path, rank)
    return RetrievedSnippet(record=record, score=1.0 / rank, rank=rank, jaccard=1.0 / rank)


def _plain(**kwargs) -> RagConfig:
    """不带元信息和续写的配置，片段长度 = key长度 + 1（换行）"""
    values = dict(m=8, k=1, context_budget=384, reserve_for_input=200,
                  include_metadata=False, include_continuation=False)
    values.update(kwargs)
    return RagConfig(**values)


class TestQuery:

    def test_takes_last_m_tokens(self):
        assert context_builder.build_query([1, 2, 3, 4, 5], 3) == [3, 4, 5]

    def test_short_input_uses_everything(self):
        assert context_builder.build_query([1, 2], 5) == [1, 2]

    def test_empty_input(self):
        assert context_builder.build_query([], 4) == []

    def test_rejects_non_positive_m(self):
        with pytest.raises(ValueError):
            context_builder.build_query([1], 0)


class TestFormat:

    def test_metadata_header_and_continuation(self, byte_spec):
        snippet = _snippet(1, 2, path="a/b.py", continuation=(7, 8))
        cfg = RagConfig(m=4, k=1, include_metadata=True, include_continuation=True)
        tokens = context_builder.format_snippet(snippet, byte_spec, cfg)
        header = byte_spec.encode("# a/b.py\n")
        assert tokens == header + [101, 102, 7, 8] + byte_spec.encode("\n")

    def test_without_continuation(self, byte_spec):
        snippet = _snippet(1, 2, continuation=(7, 8))
        tokens = context_builder.format_snippet(snippet, byte_spec, _plain())
        assert tokens == [101, 102] + byte_spec.encode("\n")


class TestAssemble:

    def test_budget_arithmetic(self, byte_spec):
        context = list(range(380))
        prompt = context_builder.assemble(context, [_snippet(1, 69)], byte_spec, _plain())
        assert len(prompt) == 384
        assert prompt.input_tokens_kept == 314
        assert prompt.tokens[-314:] == context[-314:]
        assert prompt.truncated
        assert len(prompt.snippets_used) == 1

    def test_k_zero_is_plain_context(self, byte_spec):
        context = list(range(50))
        prompt = context_builder.assemble(context, [_snippet(1, 10)], byte_spec, _plain(k=0))
        assert prompt.tokens == context
        assert prompt.snippets_used == []
        assert not prompt.truncated

    def test_snippets_precede_input(self, byte_spec):
        context = [1, 2, 3]
        prompt = context_builder.assemble(context, [_snippet(1, 2)], byte_spec, _plain())
        assert prompt.tokens == [101, 102, 10, 1, 2, 3]

    def test_drops_worst_ranked_first(self, byte_spec):
        snippets = [_snippet(2, 99), _snippet(1, 99), _snippet(3, 99)]
        prompt = context_builder.assemble(list(range(200)), snippets, byte_spec, _plain(k=3))
        # 384 - 200 = 184，只放得下一个100 token的片段
        assert [s.rank for s in prompt.snippets_used] == [1]
        assert prompt.input_tokens_kept == 200
        assert prompt.truncated

    def test_input_below_reserve_keeps_whole_input(self, byte_spec):
        context = list(range(50))
        snippets = [_snippet(1, 199), _snippet(2, 199)]
        prompt = context_builder.assemble(context, snippets, byte_spec, _plain(k=2))
        assert [s.rank for s in prompt.snippets_used] == [1]
        assert prompt.input_tokens_kept == 50
        assert len(prompt) == 250

    def test_long_input_truncated_from_front(self, byte_spec):
        context = list(range(1000))
        prompt = context_builder.assemble(context, [], byte_spec, _plain())
        assert prompt.tokens == context[-384:]
        assert prompt.truncated

    def test_postconditions_hold(self, byte_spec):
        for input_len in (0, 10, 150, 200, 383, 384, 500):
            for key_len in (5, 60, 180, 300):
                snippets = [_snippet(rank, key_len) for rank in (1, 2, 3)]
                prompt = context_builder.assemble(list(range(input_len)), snippets, byte_spec, _plain(k=3))
                assert len(prompt) <= 384
                assert prompt.input_tokens_kept >= min(input_len, 200)
                assert [s.rank for s in prompt.snippets_used] == list(range(1, len(prompt.snippets_used) + 1))

    def test_only_top_k_are_used(self, byte_spec):
        snippets = [_snippet(rank, 2) for rank in (1, 2, 3)]
        prompt = context_builder.assemble([1], snippets, byte_spec, _plain(k=2))
        assert [s.rank for s in prompt.snippets_used] == [1, 2]

    def test_best_last_order(self, byte_spec):
        snippets = [_snippet(1, 2), _snippet(2, 2)]
        prompt = context_builder.assemble([9], snippets, byte_spec, _plain(k=2, snippet_order="best_last"))
        assert prompt.tokens == [102, 103, 10, 101, 102, 10, 9]
        assert [s.rank for s in prompt.snippets_used] == [2, 1]

    def test_dynamic_k_keeps_input_intact(self, byte_spec):
        context = list(range(300))
        snippets = [_snippet(1, 49), _snippet(2, 49)]
        prompt = context_builder.assemble(context, snippets, byte_spec, _plain(k=2, dynamic_k=True))
        assert prompt.input_tokens_kept == 300
        assert [s.rank for s in prompt.snippets_used] == [1]
        assert len(prompt) == 350
        assert prompt.truncated

    def test_invalid_reserve(self, byte_spec):
        with pytest.raises(ValueError):
            RagConfig(m=4, k=1, context_budget=100, reserve_for_input=100)
