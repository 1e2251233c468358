"""Batch construction, losses, Adam, and the training loop.

Retrieval trains on minibatches of L video-sentence pairs scored as a
full L x L cross product, so every sentence ranks all L videos in the
same forward pass and the batch statistics cover the whole minibatch.
Multiple choice builds one ten-sentence candidate pool per anchor video
(the correct sentence, the four wrong choices, five fillers from other
items) and runs batch_size such pools through a single forward pass for
the same reason.  In both cases the hinge pushes each true pair's score
above every negative by the margin.  Fill-in-the-blank trains with
cross entropy over vocabulary logits on plain shuffled minibatches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TASK_FIB, TASK_MC, TASK_RETRIEVAL, TrainConfig
from .errors import ConfigError, InputError, TrainingDiverged
from .layers import Param
from .models import FibModel, MatchModel, save_model
from .preprocess import PairExample, WordSequence
from .tensor import Rng, Tensor


@dataclass
class RankingBatch:
    """Aligned candidate pairs with the index of the one true pair."""

    videos: list
    sentences: list[WordSequence]
    positive: int

    def __post_init__(self):
        if len(self.videos) != len(self.sentences):
            raise InputError(f"ranking batch has {len(self.videos)} videos and "
                             f"{len(self.sentences)} sentences")
        if not (0 <= self.positive < len(self.videos)):
            raise InputError(f"positive index {self.positive} out of range "
                             f"for batch of {len(self.videos)}")


def build_retrieval_batch(examples: list[PairExample], anchor: int, batch_size: int,
                          rng: Rng) -> RankingBatch:
    """Anchor sentence versus its own video plus batch_size - 1 foreign videos.

    Single-anchor composition for scoring one sentence against a sampled
    candidate pool.  The training loop itself ranks every sentence of an
    all-pairs minibatch at once (see train), which keeps batch statistics
    identical in spirit between training and evaluation.
    """
    if len(examples) < batch_size:
        raise InputError(f"need at least {batch_size} examples, got {len(examples)}")
    others = [i for i in range(len(examples)) if i != anchor]
    picked = rng.choice(len(others), size=batch_size - 1, replace=False)
    videos = [examples[anchor].video] + [examples[others[i]].video for i in picked]
    sentences = [examples[anchor].sentence] * batch_size
    return RankingBatch(videos=videos, sentences=sentences, positive=0)


def build_mc_batch(items, anchor: int, rng: Rng) -> RankingBatch:
    """Anchor video versus its five candidates plus five filler sentences.

    Fillers are ground-truth sentences of other items, so the pool is
    one correct sentence, four wrong choices, and five sentences drawn
    from the rest of the training data.  A filler equal to the anchor's
    true sentence is skipped (it could never satisfy the margin against
    itself); fillers merely equal to a wrong choice are harmless extra
    negatives.
    """
    item = items[anchor]
    if len(item.choices) != 5:
        raise InputError(f"item {item.id!r} has {len(item.choices)} choices, expected 5")
    n_fill = 5
    positive_key = tuple(item.choices[item.answer].token_ids)
    pool = []
    for j in range(len(items)):
        if j == anchor:
            continue
        cand = items[j].choices[items[j].answer]
        if tuple(cand.token_ids) == positive_key:
            continue
        pool.append(cand)
    if len(pool) < n_fill:
        raise InputError(f"not enough distinct filler sentences: need {n_fill}, "
                         f"have {len(pool)}")
    picked = rng.choice(len(pool), size=n_fill, replace=False)
    sentences = list(item.choices) + [pool[i] for i in picked]
    videos = [item.video] * len(sentences)
    return RankingBatch(videos=videos, sentences=sentences, positive=item.answer)


def l2_penalty(params: list[Param]) -> Tensor:
    """Sum of squares of every decay-marked parameter."""
    total = None
    for p in params:
        if not p.decay:
            continue
        term = T.sum_all(T.hadamard(p.tensor, p.tensor))
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.zeros(())
    return total


def ranking_loss(scores: Tensor, positive: int, margin: float,
                 weight_decay: float = 0.0, params: list[Param] | None = None) -> Tensor:
    """Sum of hinge violations max(0, s_neg - s_pos + margin) plus the L2 term."""
    if scores.ndim != 1:
        raise InputError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    if not (0 <= positive < n):
        raise InputError(f"positive index {positive} out of range for {n} scores")
    pos = T.tile_new_axis(T.reshape(T.narrow(scores, 0, positive, 1), ()), 0, n)
    margins = T.constant(np.full(n, float(margin)))
    mask = np.ones(n)
    mask[positive] = 0.0
    hinge = T.relu(T.add(T.add(scores, T.scale(pos, -1.0)), margins))
    loss = T.sum_all(T.hadamard(hinge, T.constant(mask)))
    if weight_decay > 0.0 and params:
        loss = T.add(loss, T.scale(l2_penalty(params), weight_decay))
    return loss


def grouped_ranking_loss(scores: Tensor, groups: list[RankingBatch], margin: float,
                         weight_decay: float = 0.0,
                         params: list[Param] | None = None) -> Tensor:
    """Sum of per-group hinge losses over a concatenated score vector.

    scores holds the groups' candidate scores back to back, so several
    anchored pools can share one forward pass (and one set of batch
    statistics) while each group keeps its own positive index.  The L2
    term is added once.
    """
    if scores.ndim != 1:
        raise InputError(f"scores must be 1-D, got shape {scores.shape}")
    if not groups:
        raise InputError("need at least one group")
    total = sum(len(g.videos) for g in groups)
    if total != scores.shape[0]:
        raise InputError(f"groups cover {total} scores, got {scores.shape[0]}")
    loss = None
    start = 0
    for g in groups:
        part = ranking_loss(T.narrow(scores, 0, start, len(g.videos)),
                            g.positive, margin)
        loss = part if loss is None else T.add(loss, part)
        start += len(g.videos)
    if weight_decay > 0.0 and params:
        loss = T.add(loss, T.scale(l2_penalty(params), weight_decay))
    return loss


def ranking_matrix_loss(scores: Tensor, margin: float, weight_decay: float = 0.0,
                        params: list[Param] | None = None) -> Tensor:
    """Hinge loss over an all-pairs score matrix with positives on the diagonal.

    scores[k, l] pairs sentence k with video l, so row k is one ranking
    problem whose true candidate sits at column k; the total is the sum
    of the per-row hinge losses plus one L2 term.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise InputError(f"need a square score matrix with diagonal positives, "
                         f"got shape {scores.shape}")
    k = scores.shape[0]
    if k < 2:
        raise InputError("an all-pairs ranking batch needs at least 2 pairs")
    diag = T.take_rows(T.reshape(scores, (k * k, 1)),
                       [i * (k + 1) for i in range(k)])
    pos = T.tile_new_axis(T.reshape(diag, (k,)), 1, k)
    margins = T.constant(np.full((k, k), float(margin)))
    mask = np.ones((k, k))
    np.fill_diagonal(mask, 0.0)
    hinge = T.relu(T.add(T.add(scores, T.scale(pos, -1.0)), margins))
    loss = T.sum_all(T.hadamard(hinge, T.constant(mask)))
    if weight_decay > 0.0 and params:
        loss = T.add(loss, T.scale(l2_penalty(params), weight_decay))
    return loss


def fib_loss(logits: Tensor, target: int, weight_decay: float = 0.0,
             params: list[Param] | None = None) -> Tensor:
    """Cross entropy of one logit row against the target vocabulary index."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    return fib_batch_loss(logits, [target], weight_decay=weight_decay, params=params)


def fib_batch_loss(logits: Tensor, targets, weight_decay: float = 0.0,
                   params: list[Param] | None = None) -> Tensor:
    """Mean cross entropy over the batch plus the L2 term."""
    if logits.ndim != 2:
        raise InputError(f"logits must be (B, V), got shape {logits.shape}")
    bsz, v = logits.shape
    targets = list(targets)
    if len(targets) != bsz:
        raise InputError(f"{len(targets)} targets for {bsz} logit rows")
    onehot = np.zeros((bsz, v))
    for row, t in enumerate(targets):
        if not (0 <= t < v):
            raise InputError(f"target {t} out of range for vocabulary of size {v}")
        onehot[row, t] = 1.0
    picked = T.sum_all(T.hadamard(T.log_softmax(logits), T.constant(onehot)))
    loss = T.scale(picked, -1.0 / bsz)
    if weight_decay > 0.0 and params:
        loss = T.add(loss, T.scale(l2_penalty(params), weight_decay))
    return loss


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: list[Param], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; missing gradients count as zero."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.tensor.data)
            v = np.zeros_like(p.tensor.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        p.tensor.data = p.tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TraceEntry:
    epoch: int
    batch: int
    loss: float


def write_loss_trace(trace: list[TraceEntry], path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "batch", "loss"])
        for entry in trace:
            writer.writerow([entry.epoch, entry.batch, repr(entry.loss)])


def _chunks(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm needs two rows; fold a lone trailing item into the previous chunk
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(model, items, cfg: TrainConfig, out_dir=None,
          on_epoch=None) -> list[TraceEntry]:
    """Optimize the model in place; returns the per-batch loss trace.

    items: PairExample list for retrieval, multiple-choice items for mc,
    blanked items for fib.  on_epoch(model, epoch, trace) may return True
    to stop early.  A non-finite loss aborts immediately, before any
    parameter update, naming the epoch and batch.
    """
    cfg.validate()
    if cfg.task in (TASK_RETRIEVAL, TASK_MC) and not isinstance(model, MatchModel):
        raise ConfigError(f"task {cfg.task!r} needs a MatchModel")
    if cfg.task == TASK_FIB and not isinstance(model, FibModel):
        raise ConfigError("task 'fib' needs a FibModel")
    if not items:
        raise InputError("training needs at least one item")
    if cfg.task in (TASK_RETRIEVAL, TASK_FIB) and len(items) < 2:
        raise InputError(f"{cfg.task} training needs at least two items")

    rng = Rng(cfg.seed)
    batch_rng = rng.spawn(1)
    dropout_rng = rng.spawn(2)
    params = model.parameters()
    state = AdamState()
    trace: list[TraceEntry] = []

    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(items))
        batches = _chunks(order, cfg.batch_size)
        for batch_no, chunk in enumerate(batches):
            model.zero_grads()
            with T.Tape() as tape:
                if cfg.task == TASK_RETRIEVAL:
                    picked = [items[int(i)] for i in chunk]
                    scores = model.cross_scores([ex.video for ex in picked],
                                                [ex.sentence for ex in picked], T.TRAIN,
                                                dropout_rng=dropout_rng)
                    loss = ranking_matrix_loss(scores, cfg.margin,
                                               cfg.weight_decay, params)
                elif cfg.task == TASK_MC:
                    groups = [build_mc_batch(items, int(i), batch_rng) for i in chunk]
                    videos = [v for g in groups for v in g.videos]
                    sentences = [s for g in groups for s in g.sentences]
                    scores = model.score_pairs(videos, sentences, T.TRAIN,
                                               dropout_rng=dropout_rng)
                    loss = grouped_ranking_loss(scores, groups, cfg.margin,
                                                cfg.weight_decay, params)
                else:
                    picked = [items[int(i)] for i in chunk]
                    logits = model.logits([it.video for it in picked],
                                          [it.sentence for it in picked], T.TRAIN,
                                          dropout_rng=dropout_rng)
                    loss = fib_batch_loss(logits, [it.target for it in picked],
                                          cfg.weight_decay, params)
                loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, batch {batch_no}")
            tape.backward(loss)
            adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            trace.append(TraceEntry(epoch=epoch, batch=batch_no, loss=loss_value))
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(model, Path(out_dir) / f"checkpoint-epoch{epoch + 1}.jsfm")
        if on_epoch is not None and on_epoch(model, epoch, trace):
            break
    return trace


def gradient_check(build_loss, params: list[Param], eps: float = 3e-5) -> list[tuple[str, float]]:
    """Compare tape gradients with central differences, per parameter group.

    build_loss must rebuild the identical scalar loss on every call (fix
    batch-norm stat updates and dropout masks beforehand).  The reported
    figure is the largest coordinate deviation divided by the group's
    largest gradient magnitude (floored at 1e-5 so vanishing groups do
    not divide by zero).

    The default step balances two error sources for losses of magnitude
    around 1e2: float64 rounding of the loss difference, which matters
    most for parameters whose true gradient is zero (biases feeding
    straight into batch norm), shrinks with a larger step, while the
    quadratic truncation term stays far below the 1e-4 scale at 3e-5.
    """
    for p in params:
        p.tensor.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = []
    for p in params:
        g = p.tensor.grad
        analytic.append(np.zeros_like(p.tensor.data) if g is None else g.copy())
    numeric = T.finite_diff_grad(lambda: build_loss().item(),
                                 [p.tensor for p in params], eps=eps)
    report = []
    for p, a, n in zip(params, analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-5)
        err = float(np.abs(a - n).max(initial=0.0) / scale)
        report.append((p.name, err))
    return report
