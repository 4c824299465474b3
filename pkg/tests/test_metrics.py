import itertools

import pytest

from peft_fusion.config import EvaluationConfig
from peft_fusion.corpus import Sample
from peft_fusion.exceptions import DataError, UsageError
from peft_fusion.metrics import (
    Prediction,
    check_metric_names,
    corpus_bleu4,
    evaluate_predictions,
    lcs_length,
    pair_predictions,
    rouge_l,
    smooth_bleu4,
    split_subtokens,
    token_prf,
)


class TestBleu:
    """Smoothed sentence and corpus BLEU-4"""

    def test_known_value(self):
        """Test a four-token candidate against a five-token reference"""
        assert smooth_bleu4("a b c d".split(), "a b c d e".split()) == pytest.approx(77.88, abs=0.01)

    def test_identity_scores_100(self):
        """Test that an exact match gets the full score"""
        tokens = "return x + y".split()
        assert smooth_bleu4(tokens, tokens) == pytest.approx(100.0)

    def test_disjoint_scores_zero(self):
        """Test that no shared unigram gives zero even with smoothing"""
        assert smooth_bleu4("p q r".split(), "a b c".split()) == 0.0
        assert smooth_bleu4([], "a b".split()) == 0.0

    def test_unsmoothed_short_candidate(self):
        """Test that without smoothing a missing 4-gram zeroes the score"""
        assert smooth_bleu4("a b c".split(), "a b c".split(), smoothing="none") == 0.0

    def test_bounds(self):
        """Test that scores stay in [0, 100] over permutations"""
        reference = "a b c d e".split()
        for candidate in itertools.permutations(reference):
            assert 0.0 <= smooth_bleu4(list(candidate), reference) <= 100.0

    def test_corpus_pools_counts(self):
        """Test corpus BLEU over identical pairs and its difference from the sentence mean"""
        pairs = ["a b c d".split(), "x y z w v".split()]
        assert corpus_bleu4(pairs, pairs) == pytest.approx(100.0)
        candidates = ["a b c d".split(), "x y".split()]
        references = ["a b c d e".split(), "x y z".split()]
        mean = sum(smooth_bleu4(c, r) for c, r in zip(candidates, references, strict=True)) / 2
        assert corpus_bleu4(candidates, references) != pytest.approx(mean)


class TestRouge:
    """LCS-based ROUGE-L"""

    def test_lcs(self):
        """Test the longest common subsequence length"""
        assert lcs_length("a b c d".split(), "a c d e".split()) == 3
        assert lcs_length([], ["a"]) == 0

    def test_known_value(self):
        """Test F = 75 for three of four tokens in order on both sides"""
        assert rouge_l("a b c d".split(), "a c d e".split()) == pytest.approx(75.0)

    def test_beta_weights_recall(self):
        """Test that a large beta moves the score towards recall"""
        candidate, reference = "a b".split(), "a b c d".split()
        assert rouge_l(candidate, reference, beta=100.0) == pytest.approx(50.0, abs=0.1)

    def test_identity_and_disjoint(self):
        """Test the bounds"""
        assert rouge_l(["a"], ["a"]) == pytest.approx(100.0)
        assert rouge_l(["a"], ["b"]) == 0.0


class TestTokenPrf:
    """Subtoken precision, recall and F1"""

    def test_known_value(self):
        """Test two of three subtokens recovered"""
        predicted = split_subtokens(["getUser"])
        truth = split_subtokens(["get_user_name"])
        precision, recall, f1 = token_prf(predicted, truth)
        assert precision == pytest.approx(1.0)
        assert recall == pytest.approx(2 / 3)
        assert f1 == pytest.approx(0.8)

    def test_multiset_counts(self):
        """Test that a repeated subtoken is matched at most as often as it occurs"""
        precision, recall, _ = token_prf(["a", "a", "a"], ["a", "b"])
        assert precision == pytest.approx(1 / 3)
        assert recall == pytest.approx(0.5)

    def test_empty_sides(self):
        """Test that empty predictions or truths score zero"""
        assert token_prf([], ["a"]) == (0.0, 0.0, 0.0)
        assert token_prf(["a"], []) == (0.0, 0.0, 0.0)

    def test_recall_grows_with_correct_tokens(self):
        """Test that adding a reference token never lowers recall"""
        truth = ["a", "b", "c", "d"]
        previous = 0.0
        for size in range(len(truth) + 1):
            _, recall, _ = token_prf(truth[:size] + ["zz"], truth)
            assert recall >= previous
            previous = recall
        assert previous == pytest.approx(1.0)


class TestEvaluation:
    """Per-sample scoring, aggregation and reports"""

    @pytest.fixture
    def predictions(self) -> list[Prediction]:
        return [
            Prediction("g1", "go", "a b c d", "a b c d e"),
            Prediction("g2", "go", "x y", "x y"),
            Prediction("r1", "ruby", "p q", "a b"),
        ]

    def test_aggregate_is_the_mean(self, predictions):
        """Test overall and per-language means of the per-sample scores"""
        result = evaluate_predictions(predictions, max_workers=2)
        bleu = result.overall["bleu4"]
        assert len(bleu.scores) == 3
        assert bleu.aggregate == pytest.approx(sum(bleu.scores) / 3)
        assert result.headline("bleu4", "ruby") == 0.0
        assert result.headline("bleu4", "go") == pytest.approx((bleu.scores[0] + bleu.scores[1]) / 2)
        assert set(result.overall) == {"bleu4", "rougeL", "prf.precision", "prf.recall", "prf.f1"}

    def test_corpus_mode(self, predictions):
        """Test that corpus mode reports the pooled score as headline"""
        config = EvaluationConfig(bleu_mode="corpus")
        result = evaluate_predictions(predictions, config, metrics=["bleu4"])
        report = result.overall["bleu4"]
        assert report.corpus_score is not None
        assert report.headline == report.corpus_score
        assert report.params == {"smoothing": "add_one", "mode": "corpus"}

    def test_unknown_metric(self, predictions):
        """Test that an unknown metric name is a usage error"""
        with pytest.raises(UsageError) as exc_info:
            evaluate_predictions(predictions, metrics=["meteor"])
        assert exc_info.value.error_code == "UNKNOWN_METRIC"
        with pytest.raises(UsageError):
            check_metric_names([])

    def test_nothing_to_evaluate(self):
        """Test that an empty prediction list is a data error"""
        with pytest.raises(DataError):
            evaluate_predictions([])

    def test_records(self, tmp_path, predictions):
        """Test the summary record followed by one record per sample"""
        result = evaluate_predictions(predictions, metrics=["rougeL"])
        records = result.records()
        assert records[0]["record"] == "summary"
        assert set(records[0]["languages"]) == {"go", "ruby"}
        assert [row["id"] for row in records[1:]] == ["g1", "g2", "r1"]
        assert records[2]["scores"] == {"rougeL": pytest.approx(100.0)}
        path = result.write(tmp_path / "report.jsonl")
        assert len(path.read_text().splitlines()) == 4

    def test_pair_predictions(self):
        """Test joining by id and the missing-prediction error"""
        references = [Sample("1", "go", "a b", "b a"), Sample("2", "ruby", "c d", "d c")]
        generated = [Sample("2", "ruby", "c d", "d x"), Sample("1", "go", "a b", "b a")]
        pairs = pair_predictions(generated, references)
        assert pairs[0] == Prediction("1", "go", "b a", "b a")
        assert pairs[1].prediction == "d x"
        with pytest.raises(DataError) as exc_info:
            pair_predictions(generated[:1], references)
        assert exc_info.value.error_code == "PREDICTION_MISSING"
