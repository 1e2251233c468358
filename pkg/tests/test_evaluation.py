"""Metric oracles (including brute-force comparison) and task evaluation."""

import numpy as np
import pytest

from conftest import toy_model_config, toy_synth_config
from jsfusion import evaluation as EV
from jsfusion.errors import InputError
from jsfusion.models import MatchModel, match_score
from jsfusion.synthdata import generate_corpus
from jsfusion.tensor import Rng


def brute_force_rank(row, gt):
    """Reference: 1-based position of gt under stable descending sort."""
    order = np.argsort(-row, kind="stable")
    return int(np.where(order == gt)[0][0]) + 1


class TestRankOfGt:
    def test_simple_cases(self):
        assert EV.rank_of_gt(np.array([5.0, 2.0, 9.0]), 0) == 2
        assert EV.rank_of_gt(np.array([5.0, 2.0, 9.0]), 2) == 1
        assert EV.rank_of_gt(np.array([5.0, 2.0, 9.0]), 1) == 3

    def test_ties_break_against_later_indices(self):
        row = np.array([3.0, 3.0, 3.0])
        assert EV.rank_of_gt(row, 0) == 1
        assert EV.rank_of_gt(row, 1) == 2
        assert EV.rank_of_gt(row, 2) == 3

    def test_matches_brute_force_on_random_rows_with_ties(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            n = int(rng.integers(2, 30))
            # draw from few distinct values so ties are common
            row = rng.choice(np.linspace(-2, 2, 5), size=n)
            gt = int(rng.integers(0, n))
            assert EV.rank_of_gt(row, gt) == brute_force_rank(row, gt), (row, gt)

    def test_bounds_checked(self):
        with pytest.raises(InputError):
            EV.rank_of_gt(np.array([1.0]), 3)


class TestAggregates:
    def test_recall_at_k(self):
        ranks = [1, 2, 3, 4]
        assert EV.recall_at_k(ranks, 1) == 0.25
        assert EV.recall_at_k(ranks, 3) == 0.75
        assert EV.recall_at_k(ranks, 10) == 1.0

    def test_median_rank_even_count_averages_center(self):
        assert EV.median_rank([1, 2, 3, 4]) == 2.5
        assert EV.median_rank([7]) == 7.0
        assert EV.median_rank([4, 1, 3]) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            EV.recall_at_k([], 1)
        with pytest.raises(InputError):
            EV.median_rank([])


@pytest.fixture(scope="module")
def model_and_data():
    data = generate_corpus(toy_synth_config(corpus_size=6, seed=4))
    model = MatchModel(toy_model_config(), Rng(4))
    return model, data


class TestScoreMatrix:
    def test_orientation_and_agreement_with_single_scores(self, model_and_data):
        model, data = model_and_data
        videos = [ex.video for ex in data.examples[:4]]
        sentences = [ex.sentence for ex in data.examples[:3]]
        matrix = EV.score_matrix(model, videos, sentences)
        assert matrix.shape == (3, 4)
        for k in range(3):
            for l in range(4):
                direct = match_score(videos[l], sentences[k], model)
                assert matrix[k, l] == pytest.approx(direct, rel=1e-9)

    def test_evaluate_retrieval_keys(self, model_and_data):
        model, data = model_and_data
        metrics = EV.evaluate_retrieval(model, data.examples)
        assert set(metrics) == {"recall@1", "recall@5", "recall@10", "median_rank"}
        assert 0.0 <= metrics["recall@1"] <= metrics["recall@5"] <= metrics["recall@10"] <= 1.0
        assert metrics["median_rank"] >= 1.0

    def test_report_files(self, model_and_data, tmp_path):
        model, data = model_and_data
        metrics = EV.evaluate_retrieval(model, data.examples)
        EV.write_metrics_json(metrics, tmp_path / "m.json")
        EV.write_metrics_table(metrics, tmp_path / "m.txt")
        import json
        assert json.loads((tmp_path / "m.json").read_text()) == metrics
        table = (tmp_path / "m.txt").read_text().splitlines()
        assert len(table) == len(metrics)
