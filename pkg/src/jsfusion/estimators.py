"""Scikit-learn style facades over the matching and blank-filling models.

Each estimator owns the full pipeline: it builds a vocabulary from the
training sentences, derives the architecture from the data dimensions
and its hyperparameters, trains with the task's loss, and exposes the
fitted model through the usual fit/predict/score surface.  Inputs are
ragged (frames, tokens) structures rather than rectangular arrays; see
validation.py for the accepted shapes.

Words unseen at fit time are dropped at prediction time, matching the
out-of-vocabulary policy of the underlying encoder.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import (
    FIB,
    MATCH,
    TASK_FIB,
    TASK_MC,
    TASK_RETRIEVAL,
    ModelConfig,
    TrainConfig,
)
from .errors import InputError
from .evaluation import rank_of_gt, recall_at_k, score_matrix
from .models import FibModel, MatchModel, fib_predict, multiple_choice
from .preprocess import (
    BLANK,
    PairExample,
    WordSequence,
    build_vocabulary,
    encode_sentence,
    sample_frames,
)
from .synthdata import FibItem, McItem
from .tensor import INFER, Rng
from .training import train
from .validation import (
    check_answer_indices,
    check_choice_list,
    check_pair_list,
    check_token_list,
)


def _build_model_config(variant, vocab_size, video_dim, est) -> ModelConfig:
    """Translate flat estimator hyperparameters into an architecture record."""
    head_last = est.fusion_dim if variant == FIB else est.head_width
    return ModelConfig(
        variant=variant,
        vocab_size=vocab_size,
        n_max=est.n_max,
        m_max=est.m_max,
        word_dim=est.word_dim,
        video_dim=video_dim,
        lstm_hidden=est.lstm_hidden,
        video_cnn_dim=est.video_cnn_dim,
        d1_dim=est.fusion_dim,
        d2_dim=est.fusion_dim,
        d3_dim=est.fusion_dim,
        d4_dim=est.fusion_dim,
        conv_channels=(est.conv_channels,) * 3,
        conv_kernel=est.conv_kernel,
        conv_strides=(1, 1, 2),
        head_dims=(est.head_width, est.head_width, head_last),
        output_dim=vocab_size if variant == FIB else 1,
        gating=est.gating,
        dropout=est.dropout,
    ).validate()


def _train_config(est, task) -> TrainConfig:
    return TrainConfig(
        task=task,
        batch_size=est.batch_size,
        margin=est.margin,
        weight_decay=est.weight_decay,
        learning_rate=est.learning_rate,
        epochs=est.epochs,
        seed=est.seed,
    ).validate()


class VideoSentenceMatcher(BaseEstimator):
    """Learns a video-sentence similarity from aligned (frames, tokens) pairs.

    fit treats each pair as a positive example and other videos in the
    batch as negatives.  decision_function scores new pairs; higher means
    a better match.  score reports recall@1 of retrieving each video by
    its own sentence, so 1.0 means every sentence ranks its true video
    first.
    """

    def __init__(self, n_max=8, m_max=8, word_dim=16, lstm_hidden=8,
                 video_cnn_dim=16, fusion_dim=16, conv_channels=16,
                 conv_kernel=2, head_width=16, gating=True, dropout=0.0,
                 batch_size=4, margin=10.0, weight_decay=5e-4,
                 learning_rate=1e-3, epochs=30, seed=0):
        self.n_max = n_max
        self.m_max = m_max
        self.word_dim = word_dim
        self.lstm_hidden = lstm_hidden
        self.video_cnn_dim = video_cnn_dim
        self.fusion_dim = fusion_dim
        self.conv_channels = conv_channels
        self.conv_kernel = conv_kernel
        self.head_width = head_width
        self.gating = gating
        self.dropout = dropout
        self.batch_size = batch_size
        self.margin = margin
        self.weight_decay = weight_decay
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def _encode_pairs(self, pairs) -> list[PairExample]:
        examples = []
        for i, (frames, tokens) in enumerate(pairs):
            video = sample_frames(frames, n_max=self.n_max)
            sentence = encode_sentence(tokens, self.vocab_, m_max=self.m_max)
            examples.append(PairExample(id=f"x{i:04d}", video=video,
                                        sentence=sentence, tokens=list(tokens)))
        return examples

    def fit(self, X, y=None):
        pairs = check_pair_list(X)
        if len(pairs) < 2:
            raise InputError(f"need at least 2 training pairs, got {len(pairs)}")
        self.vocab_ = build_vocabulary([t for _, t in pairs], min_count=1,
                                       dim=self.word_dim, seed=self.seed)
        self.config_ = _build_model_config(MATCH, self.vocab_.size,
                                           pairs[0][0].shape[1], self)
        examples = self._encode_pairs(pairs)
        model = MatchModel(self.config_, Rng(self.seed))
        self.trace_ = train(model, examples, _train_config(self, TASK_RETRIEVAL))
        self.model_ = model
        return self

    def decision_function(self, X) -> np.ndarray:
        """Match score of each (frames, tokens) pair under the fitted model."""
        check_is_fitted(self)
        examples = self._encode_pairs(check_pair_list(X))
        scores = self.model_.score_pairs([ex.video for ex in examples],
                                         [ex.sentence for ex in examples],
                                         INFER)
        return scores.data.copy()

    def score(self, X, y=None) -> float:
        """Recall@1 of retrieving each pair's video by its sentence."""
        check_is_fitted(self)
        examples = self._encode_pairs(check_pair_list(X))
        matrix = score_matrix(self.model_,
                              [ex.video for ex in examples],
                              [ex.sentence for ex in examples])
        ranks = [rank_of_gt(matrix[k], k) for k in range(len(examples))]
        return recall_at_k(ranks, 1)


class MultipleChoiceAnswerer(BaseEstimator):
    """Picks which of five candidate sentences describes a video.

    X items are (frames, five_token_lists); y gives the true candidate's
    index.  Training ranks the true candidate above the other four plus
    five ground-truth sentences borrowed from other items, batch_size
    items per optimization step, so the corpus needs enough distinct
    sentences to fill those pools.
    """

    def __init__(self, n_max=8, m_max=8, word_dim=16, lstm_hidden=8,
                 video_cnn_dim=16, fusion_dim=16, conv_channels=16,
                 conv_kernel=2, head_width=16, gating=True, dropout=0.0,
                 batch_size=8, margin=10.0, weight_decay=5e-4,
                 learning_rate=1e-3, epochs=30, seed=0):
        self.n_max = n_max
        self.m_max = m_max
        self.word_dim = word_dim
        self.lstm_hidden = lstm_hidden
        self.video_cnn_dim = video_cnn_dim
        self.fusion_dim = fusion_dim
        self.conv_channels = conv_channels
        self.conv_kernel = conv_kernel
        self.head_width = head_width
        self.gating = gating
        self.dropout = dropout
        self.batch_size = batch_size
        self.margin = margin
        self.weight_decay = weight_decay
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def _encode_items(self, items, answers) -> list[McItem]:
        encoded = []
        for i, (frames, choices) in enumerate(items):
            video = sample_frames(frames, n_max=self.n_max)
            sentences = [encode_sentence(c, self.vocab_, m_max=self.m_max)
                         for c in choices]
            encoded.append(McItem(id=f"x{i:04d}", video=video,
                                  choices=sentences, answer=int(answers[i])))
        return encoded

    def fit(self, X, y):
        items = check_choice_list(X)
        answers = check_answer_indices(y, len(items))
        corpus = [c for _, choices in items for c in choices]
        self.vocab_ = build_vocabulary(corpus, min_count=1,
                                       dim=self.word_dim, seed=self.seed)
        self.config_ = _build_model_config(MATCH, self.vocab_.size,
                                           items[0][0].shape[1], self)
        encoded = self._encode_items(items, answers)
        model = MatchModel(self.config_, Rng(self.seed))
        self.trace_ = train(model, encoded, _train_config(self, TASK_MC))
        self.model_ = model
        return self

    def predict(self, X) -> np.ndarray:
        """Index of the best candidate for each (frames, choices) item."""
        check_is_fitted(self)
        items = check_choice_list(X)
        out = []
        for frames, choices in items:
            video = sample_frames(frames, n_max=self.n_max)
            sentences = [encode_sentence(c, self.vocab_, m_max=self.m_max)
                         for c in choices]
            out.append(multiple_choice(video, sentences, self.model_))
        return np.array(out, dtype=np.int64)

    def score(self, X, y) -> float:
        predictions = self.predict(X)
        answers = check_answer_indices(y, len(predictions))
        return float((predictions == answers).mean())


class BlankFiller(BaseEstimator):
    """Predicts the word hidden behind a BLANK marker in a sentence.

    fit takes complete (frames, tokens) pairs and blanks per_sentence
    random positions per sentence itself; sentences of a single word are
    skipped (their count lands in n_skipped_).  predict takes pairs whose
    token list contains the literal BLANK marker and returns the word
    string filling it.
    """

    def __init__(self, n_max=8, m_max=8, word_dim=16, lstm_hidden=8,
                 video_cnn_dim=16, fusion_dim=16, conv_channels=16,
                 conv_kernel=2, head_width=16, gating=True, dropout=0.0,
                 per_sentence=1, batch_size=4, margin=10.0, weight_decay=5e-4,
                 learning_rate=1e-3, epochs=30, seed=0):
        self.n_max = n_max
        self.m_max = m_max
        self.word_dim = word_dim
        self.lstm_hidden = lstm_hidden
        self.video_cnn_dim = video_cnn_dim
        self.fusion_dim = fusion_dim
        self.conv_channels = conv_channels
        self.conv_kernel = conv_kernel
        self.head_width = head_width
        self.gating = gating
        self.dropout = dropout
        self.per_sentence = per_sentence
        self.batch_size = batch_size
        self.margin = margin
        self.weight_decay = weight_decay
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def _blank_items(self, pairs, rng: Rng) -> tuple[list[FibItem], int]:
        items = []
        skipped = 0
        for i, (frames, tokens) in enumerate(pairs):
            video = sample_frames(frames, n_max=self.n_max)
            sentence = encode_sentence(tokens, self.vocab_, m_max=self.m_max)
            n = len(sentence)
            if n < 2:
                skipped += 1
                continue
            k = min(self.per_sentence, n)
            positions = rng.choice(n, size=k, replace=False)
            for j, pos in enumerate(sorted(int(p) for p in positions)):
                ids = sentence.token_ids.copy()
                target = int(ids[pos])
                ids[pos] = 0
                items.append(FibItem(id=f"x{i:04d}-b{j}", video=video,
                                     sentence=WordSequence(ids, blank_position=pos),
                                     target=target))
        return items, skipped

    def fit(self, X, y=None):
        if self.per_sentence < 1:
            raise InputError(f"per_sentence must be >= 1, got {self.per_sentence}")
        pairs = check_pair_list(X)
        self.vocab_ = build_vocabulary([t for _, t in pairs], min_count=1,
                                       dim=self.word_dim, seed=self.seed)
        self.config_ = _build_model_config(FIB, self.vocab_.size,
                                           pairs[0][0].shape[1], self)
        items, self.n_skipped_ = self._blank_items(pairs, Rng(self.seed).spawn(3))
        if len(items) < 2:
            raise InputError(f"blanking produced {len(items)} training items; "
                             f"need at least 2 sentences of 2+ known words")
        model = FibModel(self.config_, Rng(self.seed))
        self.trace_ = train(model, items, _train_config(self, TASK_FIB))
        self.model_ = model
        return self

    def predict(self, X) -> np.ndarray:
        """Word filling the BLANK slot of each (frames, tokens) pair."""
        check_is_fitted(self)
        pairs = check_pair_list(X)
        out = []
        for i, (frames, tokens) in enumerate(pairs):
            check_token_list(tokens, name=f"X[{i}] tokens")
            if BLANK not in tokens:
                raise InputError(f"X[{i}] has no {BLANK} marker to fill")
            video = sample_frames(frames, n_max=self.n_max)
            sentence = encode_sentence(tokens, self.vocab_, m_max=self.m_max)
            index = fib_predict(video, sentence, self.model_)
            out.append(self.vocab_.word(index))
        return np.array(out, dtype=object)

    def score(self, X, y) -> float:
        """Fraction of blanks filled with exactly the expected word."""
        predictions = self.predict(X)
        expected = list(y) if y is not None else None
        if expected is None or len(expected) != len(predictions):
            raise InputError("y must list one expected word per item")
        return float(np.mean([p == e for p, e in zip(predictions, expected)]))
