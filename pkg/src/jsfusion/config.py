"""Model, training, and synthetic-data configuration records."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

MATCH = "match"
FIB = "fib"

TASK_RETRIEVAL = "retrieval"
TASK_MC = "mc"
TASK_FIB = "fib"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The defaults reproduce the matching variant at full scale: 40 sampled
    frames against 40 tokens, fused into a 40x40 grid that three gated
    convolution stages reduce to 17x17 before mean pooling and the dense
    scoring head.
    """

    variant: str = MATCH            # match: scalar score; fib: vocabulary logits
    vocab_size: int = 0             # includes the reserved blank index 0
    n_max: int = 40                 # frames kept per video
    m_max: int = 40                 # tokens kept per sentence
    word_dim: int = 300             # pretrained word vector width
    video_dim: int = 2176           # per-frame feature width
    lstm_hidden: int = 512          # per direction
    video_cnn_dim: int = 2048
    d1_dim: int = 512               # shared fusion width for both modalities
    d2_dim: int = 512               # attention bottleneck
    d3_dim: int = 512
    d4_dim: int = 512               # fused grid channel count
    conv_channels: tuple[int, int, int] = (256, 256, 256)
    conv_kernel: int = 3
    conv_strides: tuple[int, int, int] = (1, 1, 2)
    head_dims: tuple[int, int, int] = (256, 256, 128)
    output_dim: int = 1             # 1 for match; vocab_size for fib
    gating: bool = True             # attention + convolution gates on
    dropout: float = 0.0            # applied before each head dense layer
    fib_skip: bool = True           # add the blank token projection before the output layer
    skip_uses_context: bool = True  # skip uses the blank's contextual encoding, not just its embedding
    bn_decay: float = 0.99
    bn_eps: float = 1e-5

    @property
    def word_step_dim(self) -> int:
        return 2 * self.lstm_hidden + self.word_dim

    @property
    def video_step_dim(self) -> int:
        return self.video_cnn_dim + self.video_dim

    def extent_schedule(self) -> list[tuple[int, int]]:
        """Spatial extents of the fused grid through the convolution stages."""
        h, w = self.n_max, self.m_max
        out = [(h, w)]
        k = self.conv_kernel
        for s in self.conv_strides:
            if k > h or k > w:
                raise ConfigError(
                    f"convolution schedule underflow: kernel {k} does not fit "
                    f"a {h}x{w} grid (schedule so far {out})")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            out.append((h, w))
        return out

    def validate(self) -> "ModelConfig":
        if self.variant not in (MATCH, FIB):
            raise ConfigError(f"variant must be '{MATCH}' or '{FIB}', got {self.variant!r}")
        positive = ["n_max", "m_max", "word_dim", "video_dim", "lstm_hidden",
                    "video_cnn_dim", "d1_dim", "d2_dim", "d3_dim", "d4_dim",
                    "conv_kernel", "output_dim"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.conv_channels) != 3 or len(self.conv_strides) != 3:
            raise ConfigError("conv_channels and conv_strides must each have 3 entries")
        if any(c < 1 for c in self.conv_channels) or any(s < 1 for s in self.conv_strides):
            raise ConfigError("conv_channels and conv_strides must be positive")
        if len(self.head_dims) != 3 or any(d < 1 for d in self.head_dims):
            raise ConfigError("head_dims must be 3 positive entries")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 < self.bn_decay < 1.0):
            raise ConfigError(f"bn_decay must be in (0, 1), got {self.bn_decay}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps must be positive, got {self.bn_eps}")
        if self.variant == MATCH and self.output_dim != 1:
            raise ConfigError(f"match variant needs output_dim 1, got {self.output_dim}")
        if self.variant == FIB:
            if self.vocab_size < 2:
                raise ConfigError("fib variant needs vocab_size >= 2")
            if self.output_dim != self.vocab_size:
                raise ConfigError(
                    f"fib variant needs output_dim == vocab_size "
                    f"({self.vocab_size}), got {self.output_dim}")
            if self.fib_skip and self.head_dims[2] != self.d1_dim:
                raise ConfigError(
                    f"the skip connection adds a d1_dim ({self.d1_dim}) vector to the "
                    f"last head layer ({self.head_dims[2]}); widths must match")
        self.extent_schedule()
        return self

    def with_vocab(self, vocab_size: int) -> "ModelConfig":
        out_dim = vocab_size if self.variant == FIB else self.output_dim
        return replace(self, vocab_size=vocab_size, output_dim=out_dim)


def fib_config(vocab_size: int = 0, **overrides) -> ModelConfig:
    """Full-scale fill-in-the-blank variant: wider trunk, vocabulary-sized output."""
    base = dict(
        variant=FIB,
        vocab_size=vocab_size,
        d1_dim=1024,
        d2_dim=2048,
        d3_dim=2048,
        d4_dim=2048,
        conv_channels=(1024, 1024, 1024),
        head_dims=(1024, 1024, 1024),
        output_dim=max(vocab_size, 1),
        dropout=0.2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainConfig:
    """Optimization settings shared by all three tasks."""

    task: str = TASK_RETRIEVAL
    batch_size: int = 10            # ranking: 1 positive + (L-1) negatives; fib: plain minibatch
    margin: float = 10.0
    weight_decay: float = 0.0005
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0       # epochs between checkpoints; 0 disables

    def validate(self) -> "TrainConfig":
        if self.task not in (TASK_RETRIEVAL, TASK_MC, TASK_FIB):
            raise ConfigError(f"task must be one of retrieval/mc/fib, got {self.task!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.task in (TASK_RETRIEVAL, TASK_MC) and self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return self


@dataclass
class SynthConfig:
    """Planted-alignment synthetic corpus settings.

    Each sentence is a sequence of vocabulary words; each word emits one
    to a few consecutive frames whose features are a fixed random linear
    map of that word's latent vector plus Gaussian noise.  A model that
    learns the word-frame correspondence can match sentences to videos
    perfectly once the noise is small.
    """

    corpus_size: int = 100
    vocab_size: int = 20            # distinct words, excluding the reserved blank
    sentence_len: tuple[int, int] = (3, 6)
    frames_per_word: tuple[int, int] = (1, 3)
    feature_dim: int = 16
    latent_dim: int = 8
    embedding_dim: int = 16
    noise: float = 0.05
    seed: int = 0
    n_max: int = 40
    m_max: int = 40

    def validate(self) -> "SynthConfig":
        if self.corpus_size < 1:
            raise ConfigError(f"corpus_size must be >= 1, got {self.corpus_size}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        lo, hi = self.sentence_len
        if not (1 <= lo <= hi):
            raise ConfigError(f"sentence_len range invalid: {self.sentence_len}")
        if hi > self.m_max:
            raise ConfigError(
                f"sentence_len upper bound {hi} exceeds m_max {self.m_max}")
        flo, fhi = self.frames_per_word
        if not (1 <= flo <= fhi):
            raise ConfigError(f"frames_per_word range invalid: {self.frames_per_word}")
        if self.feature_dim < 1 or self.latent_dim < 1 or self.embedding_dim < 1:
            raise ConfigError("feature_dim, latent_dim, and embedding_dim must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.n_max < 1 or self.m_max < 1:
            raise ConfigError("n_max and m_max must be >= 1")
        return self


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
