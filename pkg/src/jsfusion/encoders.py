"""Sequence encoders for the two modalities.

Words: a bidirectional LSTM over pretrained embeddings; each position is
described by [forward state, backward state, embedding].  Videos: a single
temporal convolution (kernel 3, same padding, tanh) over per-frame
features; each position is [convolution output, raw feature].  Both
encoders zero-pad to their fixed maximum length, and padded word slots are
masked so they contribute neither values nor gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .layers import Param, glorot
from .preprocess import VideoFeatureSequence, WordSequence
from .tensor import Rng, Tensor


@dataclass
class EncodedBatch:
    """Per-position features for a batch, plus each item's true length."""

    steps: Tensor                 # (B, T, d)
    lengths: list[int]


class LstmDirection:
    """One direction of an LSTM with zero initial state.

    Gate layout along the 4H axis is [input, forget, candidate, output];
    the forget gate bias starts at 1.0 so early training does not erase
    the cell state.
    """

    def __init__(self, name: str, d_in: int, hidden: int, rng: Rng):
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        self.wx = Tensor(glorot(rng, (d_in, 4 * hidden), d_in, hidden), requires_grad=True)
        self.wh = Tensor(glorot(rng, (hidden, 4 * hidden), hidden, hidden), requires_grad=True)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def run(self, xs: Tensor, reverse: bool) -> Tensor:
        """Consume (B, T, d_in); return hidden states (B, T, H) aligned to input positions."""
        bsz, steps, d = xs.shape
        if d != self.d_in:
            raise ShapeError(f"{self.name}: input dim {d} != expected {self.d_in}")
        hidden = self.hidden
        h = T.zeros((bsz, hidden))
        c = T.zeros((bsz, hidden))
        outs: list[Tensor | None] = [None] * steps
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            x_t = T.reshape(T.narrow(xs, 1, t, 1), (bsz, d))
            z = T.add(T.add_bias(T.matmul(x_t, self.wx), self.b), T.matmul(h, self.wh))
            i = T.sigmoid(T.narrow(z, 1, 0, hidden))
            f = T.sigmoid(T.narrow(z, 1, hidden, hidden))
            g = T.tanh(T.narrow(z, 1, 2 * hidden, hidden))
            o = T.sigmoid(T.narrow(z, 1, 3 * hidden, hidden))
            c = T.add(T.hadamard(f, c), T.hadamard(i, g))
            h = T.hadamard(o, T.tanh(c))
            outs[t] = h
        return T.stack(outs, axis=1)

    def params(self) -> list[Param]:
        return [Param(f"{self.name}.wx", self.wx, True),
                Param(f"{self.name}.wh", self.wh, True),
                Param(f"{self.name}.b", self.b, False)]


def pack_word_ids(sentences: list[WordSequence], m_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad token ids to (B, m_max) with the blank index; mask is 1 inside true length."""
    if not sentences:
        raise InputError("need at least one sentence")
    ids = np.zeros((len(sentences), m_max), dtype=np.int64)
    mask = np.zeros((len(sentences), m_max), dtype=np.float64)
    for row, seq in enumerate(sentences):
        if len(seq) > m_max:
            raise InputError(f"sentence of length {len(seq)} exceeds m_max {m_max}")
        ids[row, :len(seq)] = seq.token_ids
        mask[row, :len(seq)] = 1.0
    return ids, mask


def pack_video_features(videos: list[VideoFeatureSequence], n_max: int,
                        d_v: int) -> tuple[np.ndarray, list[int]]:
    """Zero-pad frame features to (B, n_max, d_v)."""
    if not videos:
        raise InputError("need at least one video")
    feats = np.zeros((len(videos), n_max, d_v), dtype=np.float64)
    lengths = []
    for row, vid in enumerate(videos):
        if vid.dim != d_v:
            raise ShapeError(f"video feature dim {vid.dim} != configured {d_v}")
        if len(vid) > n_max:
            raise InputError(f"video with {len(vid)} frames exceeds n_max {n_max}")
        feats[row, :len(vid)] = vid.features
        lengths.append(len(vid))
    return feats, lengths


class WordEncoder:
    """Embedding lookup plus bidirectional LSTM."""

    def __init__(self, embeddings: np.ndarray, hidden: int, rng: Rng):
        if embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be (dim, vocab), got {embeddings.shape}")
        self.dim, self.vocab_size = embeddings.shape
        self.hidden = hidden
        self.embedding = Tensor(embeddings.copy(), requires_grad=True)
        self.fwd = LstmDirection("word.lstm_f", self.dim, hidden, rng.spawn(1))
        self.bwd = LstmDirection("word.lstm_b", self.dim, hidden, rng.spawn(2))

    @property
    def step_dim(self) -> int:
        return 2 * self.hidden + self.dim

    def encode(self, sentences: list[WordSequence], m_max: int) -> EncodedBatch:
        ids, mask = pack_word_ids(sentences, m_max)
        if ids.max(initial=0) >= self.vocab_size:
            raise InputError(f"token id {ids.max()} out of range for vocabulary "
                             f"of size {self.vocab_size}")
        bsz = ids.shape[0]
        flat = ids.reshape(-1)
        cols = T.take_columns(self.embedding, flat)              # (dim, B*M)
        emb = T.reshape(T.transpose2d(cols), (bsz, m_max, self.dim))
        # pin padded slots to zero so they carry no value and no gradient
        mask3 = T.constant(np.repeat(mask[:, :, None], self.dim, axis=2))
        emb = T.hadamard(emb, mask3)
        h_f = self.fwd.run(emb, reverse=False)
        h_b = self.bwd.run(emb, reverse=True)
        steps = T.concat([h_f, h_b, emb], axis=2)
        return EncodedBatch(steps=steps, lengths=[len(s) for s in sentences])

    def params(self) -> list[Param]:
        return ([Param("word.embedding", self.embedding, True)]
                + self.fwd.params() + self.bwd.params())


class VideoEncoder:
    """Temporal convolution over frame features, concatenated with the raw frames."""

    KERNEL = 3

    def __init__(self, d_v: int, d_cnn: int, rng: Rng):
        self.d_v = d_v
        self.d_cnn = d_cnn
        k = self.KERNEL
        self.kernels = Tensor(glorot(rng, (k, 1, d_v, d_cnn), k * d_v, d_cnn),
                              requires_grad=True)
        self.bias = T.zeros(d_cnn, requires_grad=True)

    @property
    def step_dim(self) -> int:
        return self.d_cnn + self.d_v

    def encode(self, videos: list[VideoFeatureSequence] | Tensor, n_max: int) -> EncodedBatch:
        if isinstance(videos, Tensor):
            if videos.ndim != 3 or videos.shape[1] != n_max or videos.shape[2] != self.d_v:
                raise ShapeError(f"video tensor must be (B, {n_max}, {self.d_v}), "
                                 f"got {videos.shape}")
            x = videos
            lengths = [n_max] * videos.shape[0]
        else:
            feats, lengths = pack_video_features(videos, n_max, self.d_v)
            x = T.constant(feats)
        bsz = x.shape[0]
        grid = T.reshape(x, (bsz, n_max, 1, self.d_v))
        pad = (self.KERNEL - 1) // 2
        padded = T.pad_axis(grid, 1, pad, pad)
        conv = T.tanh(T.conv2d(padded, self.kernels, 1, self.bias))
        conv = T.reshape(conv, (bsz, n_max, self.d_cnn))
        steps = T.concat([conv, x], axis=2)
        return EncodedBatch(steps=steps, lengths=lengths)

    def params(self) -> list[Param]:
        return [Param("video.conv.k", self.kernels, True),
                Param("video.conv.b", self.bias, False)]
