"""Corpus BLEU, exact match, and the metrics CSV round-trip."""

import math

import pytest

from gret.metrics import (CSV_HEADER, MetricRow, bleu, exact_match,
                          read_metrics, write_metrics)


class TestBleu:
    def test_identity_scores_100(self):
        refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w", "v"]]
        assert bleu(refs, refs) == pytest.approx(100.0)

    def test_disjoint_scores_0(self):
        assert bleu([["a", "b", "c"]], [["x", "y", "z"]]) == 0.0

    def test_clipping_counts_each_reference_ngram_once(self):
        # "the the the" against "the cat": one clipped match out of three
        got = bleu([["the", "the", "the"]], [["the", "cat"]], max_n=1)
        assert got == pytest.approx(100.0 / 3.0)

    def test_zero_match_floor_at_higher_orders(self):
        # unigrams perfect, the single bigram misses: floored at 1/(2*1)
        got = bleu([["a", "b"]], [["b", "a"]], max_n=2)
        assert got == pytest.approx(100.0 * math.sqrt(0.5))

    def test_orders_without_candidates_drop_out(self):
        # one-token corpus has no n-grams beyond unigrams; the mean must
        # cover only the populated orders instead of zeroing the score
        assert bleu([["a"]], [["a"]]) == pytest.approx(100.0)

    def test_brevity_penalty(self):
        got = bleu([["a", "b"]], [["a", "b", "c", "d"]])
        assert got == pytest.approx(100.0 * math.exp(-1.0))

    def test_no_penalty_when_longer(self):
        got = bleu([["a", "b", "c"]], [["a", "b"]], max_n=1)
        assert got == pytest.approx(100.0 * 2.0 / 3.0)

    def test_counts_pool_over_the_corpus(self):
        # one perfect and one disjoint sentence: pooled p1 = 1/2, not the
        # average of the per-sentence scores
        got = bleu([["a"], ["b"]], [["a"], ["c"]])
        assert got == pytest.approx(50.0)

    def test_integer_tokens_accepted(self):
        assert bleu([[4, 5, 6]], [[4, 5, 6]]) == pytest.approx(100.0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="hypotheses"):
            bleu([["a"]], [])

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            bleu([], [])

    def test_bad_order_rejected(self):
        with pytest.raises(ValueError, match="max_n"):
            bleu([["a"]], [["a"]], max_n=0)


class TestExactMatch:
    def test_fraction(self):
        assert exact_match([[1, 2], [3, 4]], [[1, 2], [4, 3]]) == 0.5

    def test_compares_by_value_not_container(self):
        assert exact_match([(1, 2)], [[1, 2]]) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="hypotheses"):
            exact_match([[1]], [])
        with pytest.raises(ValueError, match="empty"):
            exact_match([], [])


class TestMetricRows:
    def test_csv_formatting(self):
        row = MetricRow("ablate", "abc123", 200, "bleu", 12.3456789, 1.25)
        assert row.as_csv() == "ablate,abc123,200,bleu,12.3457,1.25"

    def test_split_name_in_step_column(self):
        row = MetricRow("eval", "abc123", "test", "bleu", 100.0, 0.5)
        assert row.as_csv().split(",")[2] == "test"

    def test_round_trip(self, tmp_path):
        rows = [MetricRow("train", "deadbeef0123", 1, "loss", 2.718281828, 0.01),
                MetricRow("eval", "deadbeef0123", "valid", "bleu", 98.7654321, 3.5)]
        path = tmp_path / "metrics.csv"
        write_metrics(path, rows)

        back = read_metrics(path)
        assert len(back) == 2
        assert back[0].step == 1 and isinstance(back[0].step, int)
        assert back[1].step == "valid"
        assert back[0].value == pytest.approx(2.71828, abs=1e-5)
        assert back[1].metric == "bleu"
        assert path.read_text().splitlines()[0] == CSV_HEADER

    def test_unexpected_header_rejected(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("step,loss\n1,2.0\n")
        with pytest.raises(ValueError, match="header"):
            read_metrics(path)
