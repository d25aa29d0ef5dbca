import math

import numpy as np
import pytest
from scipy.special import logsumexp

from app.core.exceptions import ConfigError, VocabMismatchError
from app.models.decoding import StopReason
from app.models.prompt import AssembledPrompt
from app.models.tokens import HealingPlan
from app.services.language_model import (
    CopyOracle,
    LanguageModel,
    NgramOracle,
    UniformOracle,
    create_model,
    decoding_service,
)


class FixedModel(LanguageModel):
    """每一步都返回同一个分数向量"""

    model_id = "fixed"

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return len(self.scores)

    def next_log_probs(self, prefix):
        return self.scores.copy()


class FailingModel(FixedModel):

    def __init__(self, vocab_size: int, fail_after: int):
        super().__init__(np.zeros(vocab_size))
        self.calls = 0
        self.fail_after = fail_after

    def next_log_probs(self, prefix):
        self.calls += 1
        if self.calls > self.fail_after:
            raise RuntimeError("backend unavailable")
        row = np.zeros(self.vocab_size)
        row[ord("a")] = 1.0
        return row


class DeadEndSpec:
    """修复候选为空的分词器替身"""

    vocab_size = 4

    def healing_candidates(self, remaining):
        return np.asarray([], dtype=np.int64)

    def token_bytes(self, idx):
        return bytes([idx])


def _complete(spec, model, text, healing=True, max_tokens=32, max_lines=1):
    plan = spec.compute_healing(text) if healing else HealingPlan.disabled(text.encode("utf-8"))
    prompt = AssembledPrompt(tokens=spec.encode(plan.trimmed_input))
    return decoding_service.greedy_complete(model, prompt, plan, max_tokens, spec, max_lines)


class TestCopyOracle:

    def test_predicts_token_after_longest_match(self):
        model = CopyOracle(10)
        assert model.predict([1, 2, 3, 9, 2, 3, 5, 1, 2]) == 3
        assert model.predict([4, 5, 4, 6, 4]) == 6   # 等长匹配取最晚出现
        assert model.predict([1, 2, 3]) is None
        assert model.predict([7]) is None

    def test_probabilities_sum_to_one(self):
        row = CopyOracle(10).next_log_probs([1, 2, 1])
        assert math.isclose(float(np.exp(row).sum()), 1.0, rel_tol=1e-9)
        assert row[2] == pytest.approx(math.log(0.9))

    def test_completes_repeated_line_with_healing(self, toy_spec):
        text = "result = foo(bar)\nx = 1\nresult = f"
        result = _complete(toy_spec, CopyOracle(toy_spec.vocab_size), text)
        assert result.generated_text == "oo(bar)"
        assert result.stop_reason == StopReason.NEWLINE
        assert result.healed_bytes == 2

    def test_completes_without_healing(self, toy_spec):
        text = "value = compute(1)\nvalue = "
        result = _complete(toy_spec, CopyOracle(toy_spec.vocab_size), text, healing=False)
        assert result.generated_text == "compute(1)"
        assert result.stop_reason == StopReason.NEWLINE


class TestGreedyDecoding:

    def test_uniform_model_runs_to_token_limit(self, toy_spec):
        result = _complete(toy_spec, UniformOracle(toy_spec.vocab_size), "x = ", healing=False, max_tokens=5)
        assert result.generated_tokens == [0] * 5
        assert result.stop_reason == StopReason.MAX_TOKENS
        assert result.generated_text == "\x00" * 5

    def test_stops_at_first_newline(self, byte_spec):
        scores = np.zeros(byte_spec.vocab_size)
        scores[ord("\n")] = 1.0
        result = _complete(byte_spec, FixedModel(scores), "abc", healing=False)
        assert result.generated_text == ""
        assert result.stop_reason == StopReason.NEWLINE
        assert len(result.generated_tokens) == 1

    def test_multi_line_budget(self, toy_spec):
        text = "def f():\n    pass\n\ndef f():\n    pass\n\ndef f():"
        result = _complete(toy_spec, CopyOracle(toy_spec.vocab_size), text, healing=False, max_lines=2)
        assert result.generated_text == "\n    pass"
        assert result.stop_reason == StopReason.NEWLINE

    def test_healing_constrains_first_tokens(self, toy_spec):
        # 分数最高的是 " pass"，但必须与剩余后缀 " wo" 兼容
        scores = np.zeros(toy_spec.vocab_size)
        scores[toy_spec.token_id(b" pass")] = 5.0
        scores[toy_spec.token_id(b" world")] = 1.0
        result = _complete(toy_spec, FixedModel(scores), "hello wo", max_tokens=2)
        assert result.generated_tokens[0] == toy_spec.token_id(b" world")
        assert result.generated_text == "rld pass"
        assert result.healed_bytes == 3

    def test_dead_end(self):
        prompt = AssembledPrompt(tokens=[1])
        plan = HealingPlan(trimmed_input=b"\x01", pending=b"\x02", rolled_back_tokens=1)
        result = decoding_service.greedy_complete(FixedModel(np.zeros(4)), prompt, plan, 8, DeadEndSpec())
        assert result.stop_reason == StopReason.HEALING_DEAD_END
        assert result.generated_tokens == []

    def test_model_error_keeps_partial_output(self, byte_spec):
        result = _complete(byte_spec, FailingModel(byte_spec.vocab_size, fail_after=3), "x", healing=False)
        assert result.stop_reason == StopReason.MODEL_ERROR
        assert result.generated_text == "aaa"
        assert "backend unavailable" in result.error

    def test_wrong_vector_length_is_model_error(self, byte_spec):
        class ShortRowModel(FixedModel):
            def next_log_probs(self, prefix):
                return np.zeros(3)

        result = _complete(byte_spec, ShortRowModel(np.zeros(byte_spec.vocab_size)), "x", healing=False)
        assert result.stop_reason == StopReason.MODEL_ERROR

    def test_vocab_mismatch(self, toy_spec):
        with pytest.raises(VocabMismatchError):
            _complete(toy_spec, UniformOracle(toy_spec.vocab_size + 1), "x")

    def test_rejects_non_positive_budget(self, toy_spec):
        with pytest.raises(ValueError):
            _complete(toy_spec, UniformOracle(toy_spec.vocab_size), "x", max_tokens=0)


class TestScoring:

    def test_rank_breaks_ties_by_token_id(self):
        model = FixedModel([0.0, 1.0, 1.0, 0.5])
        assert decoding_service.score_next_token(model, [], 1)[1] == 1
        assert decoding_service.score_next_token(model, [], 2)[1] == 2
        assert decoding_service.score_next_token(model, [], 3)[1] == 3
        assert decoding_service.score_next_token(model, [], 0)[1] == 4

    def test_log_prob_is_normalized(self):
        scores = [2.0, 0.0, -1.0]
        log_prob, _ = decoding_service.score_next_token(FixedModel(scores), [], 0)
        assert log_prob == pytest.approx(2.0 - logsumexp(scores))

    def test_uniform_log_prob(self):
        log_prob, rank = decoding_service.score_next_token(UniformOracle(8), [1, 2], 5)
        assert log_prob == pytest.approx(-math.log(8))
        assert rank == 6

    def test_rejects_out_of_range_token(self):
        with pytest.raises(ValueError):
            decoding_service.score_next_token(UniformOracle(4), [], 4)

    def test_score_sequence(self):
        stats = decoding_service.score_sequence(CopyOracle(6), [1, 2, 3, 1, 2, 3])
        assert len(stats.log_probs) == 5
        assert stats.ranks[-2:] == [1, 1]
        assert stats.log_probs[-1] == pytest.approx(math.log(0.9))


class TestNgramOracle:

    def test_follows_corpus_statistics(self):
        model = NgramOracle(6, [[1, 2, 3, 1, 2, 3, 1, 2, 4]], order=3, prompt_weight=0.0)
        assert int(np.argmax(model.next_log_probs([5, 1, 2]))) == 3
        assert int(np.argmax(model.next_log_probs([2, 3]))) == 1

    def test_prompt_cache_without_corpus(self):
        model = NgramOracle(5, [], order=3)
        scores = model.next_log_probs([4, 0, 4])
        assert int(np.argmax(scores)) == 0
        assert scores[0] == pytest.approx(0.0)

    def test_backoff_when_context_unseen(self):
        model = NgramOracle(4, [[0, 1, 0, 1]], order=2, prompt_weight=0.0)
        scores = model.next_log_probs([3])
        assert np.all(np.isfinite(scores))
        assert int(np.argmax(scores)) in (0, 1)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            NgramOracle(4, [], order=0)


class TestCreateModel:

    def test_builtin_models(self, toy_spec):
        assert isinstance(create_model("copy", toy_spec), CopyOracle)
        assert isinstance(create_model("uniform", toy_spec), UniformOracle)
        assert isinstance(create_model("ngram", toy_spec), NgramOracle)

    def test_ngram_from_corpus(self, toy_spec, sample_project):
        model = create_model("ngram", toy_spec, corpus=sample_project, order=3)
        assert model.vocab_size == toy_spec.vocab_size

    def test_unknown_model(self, toy_spec):
        with pytest.raises(ConfigError):
            create_model("gpt-17", toy_spec)
