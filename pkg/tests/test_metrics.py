import math
import random

import numpy as np
import pytest

from app.models.evaluation import ExampleRecord, PredictionPair, SingleTokenStats
from app.services.metrics_service import (
    bca_interval,
    common_prefix_length,
    edit_similarity,
    exact_match,
    metrics_service,
    mrr_at_k,
    perplexity,
    prefix_similarity_aggregate,
    ratio_of_sums,
    recall_at_k,
    score_pair,
)


def _levenshtein_dp(a: str, b: str) -> int:
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        previous, row[0] = row[0], i
        for j, cb in enumerate(b, start=1):
            previous, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, previous + (ca != cb))
    return row[-1]


def _record(example_id: str, prediction: str, target: str, project: str = "p") -> ExampleRecord:
    pair = PredictionPair.create(prediction, target)
    scores = score_pair(pair)
    return ExampleRecord(example_id=example_id, project_id=project, file_path="f.py", target=pair.target,
                         prediction=pair.predicted, em=scores["em"], edit_sim=scores["edit_sim"],
                         prefix_len=scores["prefix_len"], target_len=scores["target_len"])


class TestSingleTokenMetrics:

    def test_uniform_perplexity_is_vocab_size(self):
        stats = SingleTokenStats(log_probs=[-math.log(50)] * 7, ranks=[1] * 7)
        assert perplexity(stats) == pytest.approx(50.0)

    def test_perfect_model(self):
        stats = SingleTokenStats(log_probs=[0.0, 0.0], ranks=[1, 1])
        assert perplexity(stats) == 1.0
        assert recall_at_k(stats, 1) == mrr_at_k(stats, 1) == 1.0

    def test_perplexity_worked_example(self):
        stats = SingleTokenStats(log_probs=[-math.log(2), -math.log(8)], ranks=[1, 1])
        assert perplexity(stats) == pytest.approx(4.0)

    def test_positive_log_prob_rejected(self):
        with pytest.raises(ValueError):
            perplexity(SingleTokenStats(log_probs=[0.1], ranks=[1]))
        with pytest.raises(ValueError):
            perplexity(SingleTokenStats())

    def test_recall_and_mrr(self):
        stats = SingleTokenStats(log_probs=[-1.0] * 3, ranks=[1, 2, 11])
        assert recall_at_k(stats, 10) == pytest.approx(2 / 3)
        assert mrr_at_k(stats, 10) == pytest.approx(0.5)
        assert recall_at_k(SingleTokenStats(ranks=[6, 7]), 5) == 0.0
        assert mrr_at_k(SingleTokenStats(ranks=[6, 7]), 5) == 0.0

    def test_recall_and_mrr_are_monotone(self):
        rng = random.Random(2)
        stats = SingleTokenStats(ranks=[rng.randrange(1, 20) for _ in range(200)])
        for k in range(1, 20):
            assert recall_at_k(stats, k) <= recall_at_k(stats, k + 1)
            assert mrr_at_k(stats, k) <= mrr_at_k(stats, k + 1)
            assert mrr_at_k(stats, k) <= recall_at_k(stats, k)


class TestStringMetrics:

    def test_pair_is_stripped_once(self):
        pair = PredictionPair.create("  foo \n", "\tfoo")
        assert pair == PredictionPair("foo", "foo")
        assert exact_match(pair) == 1

    def test_worked_example(self):
        pair = PredictionPair.create("foo(bar)", "foo(baz)")
        assert exact_match(pair) == 0
        assert edit_similarity(pair) == pytest.approx(0.875)
        assert common_prefix_length(pair) == 6

    def test_empty_strings(self):
        assert edit_similarity(PredictionPair("", "")) == 1.0
        assert edit_similarity(PredictionPair("", "abc")) == 0.0

    def test_prefix_aggregate_is_length_weighted(self):
        pairs = [PredictionPair.create("ab", "abcd"), PredictionPair.create("x", "yy")]
        assert prefix_similarity_aggregate(pairs) == pytest.approx(1 / 3)
        with pytest.raises(ValueError):
            prefix_similarity_aggregate([PredictionPair("a", "")])

    def test_edit_similarity_matches_dp_and_is_symmetric(self):
        rng = random.Random(9)
        alphabet = "ab(x) é"
        for _ in range(300):
            s = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 9)))
            t = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 9)))
            pair = PredictionPair(s, t)
            longest = max(len(s), len(t))
            expected = 1.0 if longest == 0 else 1.0 - _levenshtein_dp(s, t) / longest
            assert edit_similarity(pair) == pytest.approx(expected)
            assert edit_similarity(pair) == pytest.approx(edit_similarity(PredictionPair(t, s)))

    def test_exact_match_implies_full_scores(self):
        pair = PredictionPair.create("return x", "return x")
        assert edit_similarity(pair) == 1.0
        assert common_prefix_length(pair) == len(pair.target)


class TestBcaInterval:

    def test_constant_values_degenerate(self):
        interval = bca_interval([0.5] * 20)
        assert (interval.point, interval.lo, interval.hi) == (0.5, 0.5, 0.5)
        assert interval.method == "BCa"

    def test_requires_two_values(self):
        with pytest.raises(ValueError):
            bca_interval([1.0])

    def test_bounds_stay_in_range(self):
        interval = bca_interval([0.0, 1.0, 0.0, 1.0, 1.0], resamples=1000, seed=4)
        assert 0.0 <= interval.lo <= interval.point <= interval.hi <= 1.0

    def test_seeded_is_reproducible(self):
        values = np.random.default_rng(1).random(40)
        assert bca_interval(values, seed=3) == bca_interval(values, seed=3)

    def test_custom_statistic(self):
        rows = np.array([[2, 4], [0, 2], [3, 3], [1, 5]], dtype=float)
        interval = bca_interval(rows, statistic=ratio_of_sums, resamples=300)
        assert interval.point == pytest.approx(6 / 14)
        assert interval.lo <= interval.point <= interval.hi

    def test_coverage_of_bernoulli_mean(self):
        covered = 0
        trials = 200
        for trial in range(trials):
            draws = np.random.default_rng(1000 + trial).integers(0, 2, size=500)
            interval = bca_interval(draws, resamples=1000, seed=trial)
            covered += interval.lo <= 0.5 <= interval.hi
        assert 0.89 <= covered / trials <= 0.99


class TestSummary:

    def test_summary_points(self):
        records = [
            _record("a", "foo(bar)", "foo(baz)"),
            _record("b", "x = 1", "x = 1"),
            _record("c", "", "return y"),
        ]
        report = metrics_service.summarize(records, dataset="toy", model_id="copy", resamples=200)
        assert report.n == 3
        assert report.em.point == pytest.approx(1 / 3)
        assert report.edit_sim.point == pytest.approx((0.875 + 1.0 + 0.0) / 3)
        assert report.prefix_sim.point == pytest.approx((6 + 5 + 0) / (8 + 5 + 8))
        data = report.to_dict()
        assert set(data) >= {"dataset", "model_id", "n", "em", "edit_sim", "prefix_sim", "single_token", "per_example"}
        assert set(data["em"]) == {"point", "lo", "hi"}

    def test_single_record_has_point_interval(self):
        report = metrics_service.summarize([_record("a", "x", "xy")], resamples=100)
        assert report.prefix_sim.lo == report.prefix_sim.hi == pytest.approx(0.5)

    def test_single_token_block(self):
        stats = SingleTokenStats(log_probs=[-math.log(4)] * 4, ranks=[1, 2, 3, 9])
        report = metrics_service.summarize([_record("a", "x", "x")], single_token=stats, resamples=100)
        assert report.single_token["ppl"] == pytest.approx(4.0)
        assert report.single_token["r1"] == 0.25
        assert report.single_token["r5"] == 0.75
        assert report.single_token["n"] == 4

    def test_compare_to_baseline(self):
        baseline = [_record("a", "fo", "foo"), _record("b", "bar", "bar"), _record("c", "", "z")]
        records = [_record("a", "foo", "foo"), _record("b", "ba", "bar"), _record("c", "", "z")]
        assert metrics_service.compare_to_baseline(records, baseline) == (1, 1, 1)
        with pytest.raises(ValueError):
            metrics_service.compare_to_baseline([_record("d", "", "z")], baseline)
