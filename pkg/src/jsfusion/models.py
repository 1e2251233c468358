"""Full models for the three tasks, plus checkpoint and diagnostic output.

Checkpoint format (binary, little endian):
    magic b"JSFM", uint32 version (1), uint32 config length, config JSON,
    uint32 entry count, then per entry: uint32 name length, name UTF-8,
    uint8 rank, uint32 dims, float64 payload in row-major order.
Entries cover every trainable parameter and every batch-norm running
statistic, so save followed by load reproduces scores bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import FIB, MATCH, ModelConfig
from .decoder import HierarchicalDecoder
from .encoders import VideoEncoder, WordEncoder
from .errors import ConfigError, FormatError, InputError
from .fusion import JointFusion
from .layers import Dense, Param
from .preprocess import BLANK_INDEX, VideoFeatureSequence, WordSequence
from .tensor import Rng, Tensor

CHECKPOINT_MAGIC = b"JSFM"
CHECKPOINT_VERSION = 1


class _Network:
    """Shared assembly: encoders, projections, fusion, decoder."""

    def __init__(self, config: ModelConfig, rng: Rng,
                 embeddings: np.ndarray | None = None):
        config.validate()
        if config.vocab_size < 2:
            raise ConfigError(f"building a model needs vocab_size >= 2, got {config.vocab_size}")
        self.config = config
        if embeddings is None:
            emb = np.zeros((config.word_dim, config.vocab_size))
            emb[:, 1:] = rng.spawn(90).normal((config.word_dim, config.vocab_size - 1)) * 0.1
            embeddings = emb
        if embeddings.shape != (config.word_dim, config.vocab_size):
            raise ConfigError(
                f"embeddings shape {embeddings.shape} != "
                f"({config.word_dim}, {config.vocab_size})")
        self.word_encoder = WordEncoder(embeddings, config.lstm_hidden, rng.spawn(1))
        self.video_encoder = VideoEncoder(config.video_dim, config.video_cnn_dim, rng.spawn(2))
        self.proj_word = Dense("proj.word", config.word_step_dim, config.d1_dim,
                               rng.spawn(3), activation="tanh", use_bn=True,
                               bn_decay=config.bn_decay, bn_eps=config.bn_eps)
        self.proj_video = Dense("proj.video", config.video_step_dim, config.d1_dim,
                                rng.spawn(4), activation="tanh", use_bn=True,
                                bn_decay=config.bn_decay, bn_eps=config.bn_eps)
        self.fusion = JointFusion(config.d1_dim, config.d2_dim, config.d3_dim,
                                  config.d4_dim, rng.spawn(5), gating=config.gating,
                                  bn_decay=config.bn_decay, bn_eps=config.bn_eps)
        self.decoder = HierarchicalDecoder(
            config.d4_dim, config.conv_channels, config.conv_kernel, config.conv_strides,
            config.head_dims, config.output_dim, rng.spawn(6), gating=config.gating,
            bn_decay=config.bn_decay, bn_eps=config.bn_eps)

    # -- parameters and state ------------------------------------------------

    def parameters(self) -> list[Param]:
        out = (self.word_encoder.params() + self.video_encoder.params()
               + self.proj_word.params() + self.proj_video.params()
               + self.fusion.params() + self.decoder.params())
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return (self.proj_word.state_arrays() + self.proj_video.state_arrays()
                + self.fusion.state_arrays() + self.decoder.state_arrays())

    def load_state(self, name: str, value: np.ndarray):
        for dense in (self.proj_word, self.proj_video):
            if name.startswith(dense.name + "."):
                dense.load_state(name, value)
                return
        try:
            self.fusion.load_state(name, value)
            return
        except KeyError:
            pass
        try:
            self.decoder.load_state(name, value)
            return
        except KeyError:
            pass
        raise FormatError(f"checkpoint state entry {name!r} does not match the model")

    def zero_grads(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    # -- shared forward pieces -----------------------------------------------

    def project_words(self, sentences: list[WordSequence], mode: str) -> Tensor:
        """Contextual word features projected into the shared space: (B, M, d1)."""
        batch = self.word_encoder.encode(sentences, self.config.m_max)
        bsz, m, d = batch.steps.shape
        flat = T.reshape(batch.steps, (bsz * m, d))
        proj = self.proj_word(flat, mode)
        return T.reshape(proj, (bsz, m, self.config.d1_dim))

    def project_videos(self, videos, mode: str) -> Tensor:
        """Temporal video features projected into the shared space: (B, N, d1)."""
        batch = self.video_encoder.encode(videos, self.config.n_max)
        bsz, n, d = batch.steps.shape
        flat = T.reshape(batch.steps, (bsz * n, d))
        proj = self.proj_video(flat, mode)
        return T.reshape(proj, (bsz, n, self.config.d1_dim))

    def _tile_or_project_words(self, sentences, mode, copies):
        if len(sentences) > 1 and all(s is sentences[0] for s in sentences):
            one = self.project_words([sentences[0]], mode)
            flat = T.reshape(one, (one.shape[1], one.shape[2]))
            return T.tile_new_axis(flat, 0, copies)
        return self.project_words(sentences, mode)

    def _tile_or_project_videos(self, videos, mode, copies):
        if isinstance(videos, list) and len(videos) > 1 \
                and all(v is videos[0] for v in videos):
            one = self.project_videos([videos[0]], mode)
            flat = T.reshape(one, (one.shape[1], one.shape[2]))
            return T.tile_new_axis(flat, 0, copies)
        return self.project_videos(videos, mode)

    def _decode(self, video_proj: Tensor, word_proj: Tensor, mode: str,
                maps: dict | None, dropout_rng: Rng | None) -> Tensor:
        """Run fusion, convolution stages, and the dense head; (B, head3)."""
        grid = self.fusion.forward(video_proj, word_proj, mode, maps=maps)
        pooled = self.decoder.decode(grid, maps=maps)
        return self.decoder.head_features(pooled, mode,
                                          dropout_rate=self.config.dropout,
                                          dropout_rng=dropout_rng)


class MatchModel(_Network):
    """Scores how well a sentence describes a video; higher is better."""

    def __init__(self, config: ModelConfig, rng: Rng, embeddings=None):
        if config.variant != MATCH:
            raise ConfigError(f"MatchModel needs variant '{MATCH}', got {config.variant!r}")
        super().__init__(config, rng, embeddings)

    def score_pairs(self, videos, sentences, mode: str,
                    maps: dict | None = None, dropout_rng: Rng | None = None) -> Tensor:
        """Elementwise scores for aligned lists: out[i] = score(videos[i], sentences[i]).

        When one side repeats the same object (a ranking batch), it is
        encoded once and tiled; batch statistics are unchanged because
        the repeated rows are identical.
        """
        if isinstance(videos, list) and len(videos) != len(sentences):
            raise InputError(f"got {len(videos)} videos and {len(sentences)} sentences")
        bsz = len(sentences)
        wp = self._tile_or_project_words(sentences, mode, bsz)
        vp = self._tile_or_project_videos(videos, mode, bsz)
        feats = self._decode(vp, wp, mode, maps, dropout_rng)
        scores = self.decoder.output(feats)
        return T.reshape(scores, (bsz,))

    def score_from_projections(self, video_proj: Tensor, word_proj: Tensor,
                               mode: str) -> Tensor:
        bsz = video_proj.shape[0]
        feats = self._decode(video_proj, word_proj, mode, None, None)
        return T.reshape(self.decoder.output(feats), (bsz,))

    def cross_scores(self, videos, sentences, mode: str,
                     dropout_rng: Rng | None = None) -> Tensor:
        """Score every sentence against every video: out[k, l] = s(video l, sentence k).

        Each side is encoded once; the K x L pair grid is formed by tiling
        the projections, so batch statistics are taken over all K
        sentences and all L videos together.
        """
        wp = self.project_words(sentences, mode)
        vp = self.project_videos(videos, mode)
        k, m, d = wp.shape
        l, n, _ = vp.shape
        wp_grid = T.reshape(T.tile_new_axis(wp, 1, l), (k * l, m, d))
        vp_grid = T.reshape(T.tile_new_axis(vp, 0, k), (k * l, n, d))
        feats = self._decode(vp_grid, wp_grid, mode, None, dropout_rng)
        return T.reshape(self.decoder.output(feats), (k, l))


class FibModel(_Network):
    """Predicts the word hidden behind the blank slot of a sentence."""

    def __init__(self, config: ModelConfig, rng: Rng, embeddings=None):
        if config.variant != FIB:
            raise ConfigError(f"FibModel needs variant '{FIB}', got {config.variant!r}")
        super().__init__(config, rng, embeddings)

    def logits(self, videos, sentences: list[WordSequence], mode: str,
               dropout_rng: Rng | None = None, maps: dict | None = None) -> Tensor:
        """Vocabulary logits (B, |V|) for sentences with one blanked slot each."""
        if isinstance(videos, list) and len(videos) != len(sentences):
            raise InputError(f"got {len(videos)} videos and {len(sentences)} sentences")
        for s in sentences:
            if s.blank_position is None:
                raise InputError("every sentence must contain exactly one blank slot")
        bsz = len(sentences)
        wp = self.project_words(sentences, mode)
        vp = self._tile_or_project_videos(videos, mode, bsz)
        feats = self._decode(vp, wp, mode, maps, dropout_rng)
        if self.config.fib_skip:
            skip = self._skip_vector(wp, sentences, mode)
            feats = T.add(feats, skip)
        return self.decoder.output(feats)

    def _skip_vector(self, word_proj: Tensor, sentences, mode: str) -> Tensor:
        """Projected blank-slot vector (B, d1) added before the output layer.

        By default this reuses the contextual projection at the blank
        position.  With skip_uses_context off it projects [0, 0, blank
        embedding] instead, isolating the slot from its context; that
        extra pass never touches the projection layer's running stats.
        """
        bsz, m, d1 = word_proj.shape
        if self.config.skip_uses_context:
            flat = T.reshape(word_proj, (bsz * m, d1))
            rows = [i * m + s.blank_position for i, s in enumerate(sentences)]
            return T.take_rows(flat, rows)
        emb = self.word_encoder.embedding
        cols = T.take_columns(emb, [BLANK_INDEX] * bsz)
        states = T.zeros((bsz, 2 * self.config.lstm_hidden))
        x = T.concat([states, T.transpose2d(cols)], axis=1)
        return self.proj_word(x, mode, update_stats=False)


# ---------------------------------------------------------------------------
# Task-level functions
# ---------------------------------------------------------------------------


def match_score(video: VideoFeatureSequence, sentence: WordSequence,
                model: MatchModel) -> float:
    """Similarity of one (video, sentence) pair under the trained model."""
    return float(model.score_pairs([video], [sentence], T.INFER).data[0])


def multiple_choice(video: VideoFeatureSequence, choices: list[WordSequence],
                    model: MatchModel) -> int:
    """Index of the best of exactly five candidate sentences; ties pick the lowest."""
    if len(choices) != 5:
        raise InputError(f"multiple choice needs exactly 5 candidates, got {len(choices)}")
    scores = model.score_pairs([video] * 5, list(choices), T.INFER).data
    return int(np.argmax(scores))


def fib_logits(video: VideoFeatureSequence, sentence: WordSequence,
               model: FibModel) -> np.ndarray:
    """Vocabulary logits for the blanked slot of one sentence."""
    return model.logits([video], [sentence], T.INFER).data[0].copy()


def fib_predict(video: VideoFeatureSequence, sentence: WordSequence,
                model: FibModel) -> int:
    """Vocabulary index filling the blank; ties pick the lowest index."""
    return int(np.argmax(fib_logits(video, sentence, model)))


def diagnostics(model: _Network, video: VideoFeatureSequence,
                sentence: WordSequence) -> dict[str, np.ndarray]:
    """Attention and convolution gate maps for one pair, keyed by layer."""
    maps: dict[str, np.ndarray] = {}
    if isinstance(model, FibModel):
        model.logits([video], [sentence], T.INFER, maps=maps)
    else:
        model.score_pairs([video], [sentence], T.INFER, maps=maps)
    return {k: v[0] for k, v in maps.items()}


def write_pgm(path, matrix: np.ndarray):
    """Write a [0, 1] matrix as a plain-text PGM (P2) grayscale image."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"PGM output needs a 2-D matrix, got shape {m.shape}")
    levels = np.clip(np.rint(m * 255), 0, 255).astype(int)
    lines = ["P2", f"{m.shape[1]} {m.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _config_to_json(config: ModelConfig) -> bytes:
    d = dataclasses.asdict(config)
    return json.dumps(d, sort_keys=True).encode("utf-8")


def _config_from_json(blob: bytes) -> ModelConfig:
    d = json.loads(blob.decode("utf-8"))
    for key in ("conv_channels", "conv_strides", "head_dims"):
        d[key] = tuple(d[key])
    return ModelConfig(**d)


def save_model(model: _Network, path):
    """Serialize config, parameters, and running statistics."""
    entries = [(p.name, p.tensor.data) for p in model.parameters()]
    entries += [(name, arr) for name, arr in model.state_arrays()]
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate entry names in checkpoint")
    cfg = _config_to_json(model.config)
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> _Network:
    """Rebuild a model from a checkpoint; scores match the saved model exactly."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0 (expected {CHECKPOINT_MAGIC!r})")
    off = 4
    version, cfg_len = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = _config_from_json(blob[off:off + cfg_len])
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: bad config block ({exc})") from None
    off += cfg_len
    (n_entries,) = struct.unpack_from("<I", blob, off)
    off += 4
    cls = FibModel if config.variant == FIB else MatchModel
    model = cls(config, Rng(0))
    params = {p.name: p.tensor for p in model.parameters()}
    state_names = {name for name, _ in model.state_arrays()}
    seen = set()
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        seen.add(name)
        if name in params:
            if params[name].data.shape != arr.shape:
                raise FormatError(f"{path}: entry {name!r} has shape {arr.shape}, "
                                  f"model expects {params[name].data.shape}")
            params[name].data = arr.astype(np.float64).copy()
        elif name in state_names:
            model.load_state(name, arr)
        else:
            raise FormatError(f"{path}: unknown checkpoint entry {name!r}")
    missing = (set(params) | state_names) - seen
    if missing:
        raise FormatError(f"{path}: checkpoint missing entries {sorted(missing)[:5]}")
    return model
