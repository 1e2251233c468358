"""Retrieval metrics and task evaluation.

Ranks are 1-based under stable descending order: a candidate tied with
the ground truth but carrying a lower index counts as ranked ahead of
it.  Recall@k is the fraction of queries whose true candidate ranks in
the top k; the median rank of an even count averages the central pair.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import InputError
from .models import FibModel, MatchModel, fib_predict, multiple_choice
from .preprocess import PairExample


def score_matrix(model: MatchModel, videos: list, sentences: list) -> np.ndarray:
    """scores[k, l] = score of video l against sentence k.

    Videos are encoded once and reused across all sentence queries;
    inference mode keeps every row independent of the others.
    """
    if not videos or not sentences:
        raise InputError("score_matrix needs at least one video and one sentence")
    video_proj = model.project_videos(videos, T.INFER)
    n_videos = len(videos)
    rows = []
    for sent in sentences:
        wp = model.project_words([sent], T.INFER)
        flat = T.reshape(wp, (wp.shape[1], wp.shape[2]))
        tiled = T.tile_new_axis(flat, 0, n_videos)
        rows.append(model.score_from_projections(video_proj, tiled, T.INFER).data)
    return np.stack(rows, axis=0)


def rank_of_gt(scores_row: np.ndarray, gt: int) -> int:
    """1-based rank of the ground-truth candidate; index ties break against it."""
    row = np.asarray(scores_row, dtype=np.float64)
    if row.ndim != 1:
        raise InputError(f"scores row must be 1-D, got shape {row.shape}")
    if not (0 <= gt < row.size):
        raise InputError(f"ground-truth index {gt} out of range for {row.size} candidates")
    target = row[gt]
    ahead = int((row > target).sum())
    tied_before = int((row[:gt] == target).sum())
    return 1 + ahead + tied_before


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise InputError("recall needs at least one rank")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    return float((ranks <= k).mean())


def median_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise InputError("median rank needs at least one rank")
    return float(np.median(ranks))


def retrieval_ranks(model: MatchModel, examples: list[PairExample]) -> np.ndarray:
    """Rank of each example's own video among all videos, queried by its sentence."""
    videos = [ex.video for ex in examples]
    sentences = [ex.sentence for ex in examples]
    matrix = score_matrix(model, videos, sentences)
    return np.array([rank_of_gt(matrix[k], k) for k in range(len(examples))])


def evaluate_retrieval(model: MatchModel, examples: list[PairExample]) -> dict:
    ranks = retrieval_ranks(model, examples)
    return {
        "recall@1": recall_at_k(ranks, 1),
        "recall@5": recall_at_k(ranks, 5),
        "recall@10": recall_at_k(ranks, 10),
        "median_rank": median_rank(ranks),
    }


def evaluate_multiple_choice(model: MatchModel, items) -> dict:
    if not items:
        raise InputError("multiple-choice evaluation needs at least one item")
    correct = sum(1 for it in items
                  if multiple_choice(it.video, it.choices, model) == it.answer)
    return {"accuracy": correct / len(items)}


def evaluate_fib(model: FibModel, items) -> dict:
    if not items:
        raise InputError("fill-in-the-blank evaluation needs at least one item")
    correct = sum(1 for it in items
                  if fib_predict(it.video, it.sentence, model) == it.target)
    return {"accuracy": correct / len(items)}


def write_metrics_json(metrics: dict, path):
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_metrics_table(metrics: dict, path):
    width = max(len(k) for k in metrics)
    lines = [f"{k.ljust(width)}  {metrics[k]:.4f}" for k in sorted(metrics)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
