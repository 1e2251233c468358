"""Vocabulary construction, sentence/video encoding, and dataset file formats.

On-disk formats
---------------
Feature file (binary, little endian):
    magic b"JSFV", uint32 version (1), uint32 frame count N, uint32 feature
    dim d_v, then N*d_v float32 values in row-major order.

Corpus file (UTF-8 text): one JSON record per line with fields
    id            unique string
    sentence      whitespace-separated tokens
    feature_path  path to the feature file, relative to the corpus file
"""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, ShapeError
from .tensor import Rng

log = logging.getLogger(__name__)

BLANK = "BLANK"          # reserved placeholder token
BLANK_INDEX = 0

FEATURE_MAGIC = b"JSFV"
FEATURE_VERSION = 1


class Vocabulary:
    """Token-to-index map with an embedding column per token.

    Index 0 is the reserved blank placeholder with an all-zero embedding.
    Real words occupy indices 1..size-1 ordered by descending corpus count,
    ties broken lexicographically.
    """

    def __init__(self, words: list[str], embeddings: np.ndarray):
        if embeddings.ndim != 2 or embeddings.shape[1] != len(words) + 1:
            raise ShapeError(
                f"embeddings must be (dim, {len(words) + 1}) including the blank column, "
                f"got {embeddings.shape}")
        if np.any(embeddings[:, BLANK_INDEX] != 0):
            raise InputError("the blank embedding column must be all zeros")
        self.index_to_word = [BLANK] + list(words)
        self.word_to_index = {w: i for i, w in enumerate(self.index_to_word)}
        if len(self.word_to_index) != len(self.index_to_word):
            raise InputError("vocabulary contains duplicate words")
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)

    @property
    def size(self) -> int:
        return len(self.index_to_word)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[0]

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_index

    def index(self, word: str) -> int:
        try:
            return self.word_to_index[word]
        except KeyError:
            raise InputError(f"word {word!r} not in vocabulary") from None

    def word(self, index: int) -> str:
        if not (0 <= index < self.size):
            raise InputError(f"index {index} out of range for vocabulary of size {self.size}")
        return self.index_to_word[index]


def build_vocabulary(sentences: list[list[str]], min_count: int = 4,
                     dim: int = 300, seed: int = 0) -> Vocabulary:
    """Keep words whose corpus count reaches min_count; embed them randomly.

    Output is invariant to the order of sentences: ordering depends only on
    (count, word) and embeddings are drawn in that canonical order.  The
    random columns are scaled by 0.1 to sit in the typical range of
    pretrained vectors; supply real vectors with load_embeddings.
    """
    if min_count < 1:
        raise InputError(f"min_count must be >= 1, got {min_count}")
    if dim < 1:
        raise InputError(f"embedding dim must be >= 1, got {dim}")
    counts = Counter()
    for tokens in sentences:
        counts.update(tokens)
    counts.pop(BLANK, None)  # the placeholder never becomes a real word
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    rng = Rng(seed)
    emb = np.zeros((dim, len(kept) + 1), dtype=np.float64)
    if kept:
        emb[:, 1:] = rng.normal((dim, len(kept))) * 0.1
    return Vocabulary(kept, emb)


def load_embeddings(path, vocab: Vocabulary) -> Vocabulary:
    """Overwrite embedding columns from a text file of "word v1 v2 ... vd" lines.

    The first occurrence of a word wins.  Words absent from the file keep
    their random initialization; the blank column stays zero.
    """
    path = Path(path)
    seen = set()
    matched = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) < 2:
                raise FormatError(f"{path}, line {lineno}: expected a word and values")
            word, values = parts[0], parts[1:]
            if len(values) != vocab.dim:
                raise FormatError(
                    f"{path}, line {lineno}: expected {vocab.dim} values, got {len(values)}")
            if word in seen:
                continue
            seen.add(word)
            if word == BLANK or word not in vocab:
                continue
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}, line {lineno}: non-numeric value ({exc})") from None
            vocab.embeddings[:, vocab.index(word)] = vec
            matched += 1
    if matched == 0:
        log.warning("no vocabulary words matched embeddings in %s", path)
    return vocab


@dataclass
class WordSequence:
    """Encoded sentence: vocabulary indices, optionally with one blanked slot."""

    token_ids: np.ndarray
    blank_position: int | None = None

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise InputError(f"token_ids must be a nonempty 1-D sequence, got shape {ids.shape}")
        if np.any(ids < 0):
            raise InputError("token_ids must be nonnegative")
        self.token_ids = ids
        if self.blank_position is not None:
            b = int(self.blank_position)
            if not (0 <= b < ids.size):
                raise InputError(
                    f"blank_position {b} out of range for sentence of length {ids.size}")
            if ids[b] != BLANK_INDEX:
                raise InputError(f"blank_position {b} does not hold the blank index")
            self.blank_position = b

    def __len__(self) -> int:
        return int(self.token_ids.size)


def encode_sentence(tokens: list[str], vocab: Vocabulary, m_max: int = 40) -> WordSequence:
    """Map tokens to indices, dropping out-of-vocabulary words, then truncate.

    The literal blank placeholder maps to index 0.  A sentence whose words
    are all out of vocabulary cannot be encoded.
    """
    if m_max < 1:
        raise InputError(f"m_max must be >= 1, got {m_max}")
    ids = [vocab.word_to_index[t] for t in tokens if t in vocab.word_to_index]
    if not ids:
        raise InputError(f"sentence has no in-vocabulary words: {' '.join(tokens)!r}")
    ids = ids[:m_max]
    blank = ids.index(BLANK_INDEX) if BLANK_INDEX in ids else None
    return WordSequence(np.array(ids, dtype=np.int64), blank_position=blank)


@dataclass
class VideoFeatureSequence:
    """Per-frame feature rows, at most n_max of them after sampling."""

    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise InputError(
                f"features must be a nonempty (N, d_v) matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InputError("features contain non-finite values")
        self.features = feats

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def sample_frames(features: np.ndarray, n_max: int = 40) -> VideoFeatureSequence:
    """Keep at most n_max frames at equidistant positions floor(i * N / n_max)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise InputError(f"features must be a nonempty (N, d_v) matrix, got shape {feats.shape}")
    if n_max < 1:
        raise InputError(f"n_max must be >= 1, got {n_max}")
    n = feats.shape[0]
    if n <= n_max:
        return VideoFeatureSequence(feats.copy())
    idx = (np.arange(n_max, dtype=np.int64) * n) // n_max
    return VideoFeatureSequence(feats[idx].copy())


def write_feature_file(path, seq: VideoFeatureSequence):
    path = Path(path)
    n, d = seq.features.shape
    payload = np.ascontiguousarray(seq.features, dtype="<f4").tobytes()
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, n, d))
        fh.write(payload)


def read_feature_file(path) -> VideoFeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0 (expected {FEATURE_MAGIC!r})")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: invalid dimensions {n}x{d} at byte offset 8")
    expected = 16 + 4 * n * d
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload ends at byte offset {len(blob)}, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f4", offset=16)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError(
            f"{path}: non-finite value at byte offset {16 + 4 * int(bad[0])}")
    return VideoFeatureSequence(flat.astype(np.float64).reshape(n, d))


@dataclass
class PairExample:
    """One aligned (video, sentence) training or evaluation item."""

    id: str
    video: VideoFeatureSequence
    sentence: WordSequence
    tokens: list[str] = field(default_factory=list)


def write_corpus_file(path, records: list[dict]):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            for key in ("id", "sentence", "feature_path"):
                if key not in rec:
                    raise InputError(f"corpus record missing field {key!r}: {rec}")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus_file(path) -> list[dict]:
    path = Path(path)
    records = []
    ids = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}, line {lineno}: invalid JSON ({exc})") from None
            for key in ("id", "sentence", "feature_path"):
                if key not in rec:
                    raise FormatError(f"{path}, line {lineno}: missing field {key!r}")
            if rec["id"] in ids:
                raise FormatError(f"{path}, line {lineno}: duplicate id {rec['id']!r}")
            ids.add(rec["id"])
            records.append(rec)
    if not records:
        raise FormatError(f"{path}: corpus file has no records")
    return records


def load_dataset(corpus_path, vocab: Vocabulary | None = None, min_count: int = 4,
                 embedding_dim: int = 300, m_max: int = 40, n_max: int = 40,
                 seed: int = 0) -> tuple[Vocabulary, list[PairExample]]:
    """Read a corpus file plus its feature files into encoded examples.

    When no vocabulary is given one is built from the corpus itself, so a
    train/eval round trip through disk reconstructs the identical mapping.
    """
    corpus_path = Path(corpus_path)
    records = read_corpus_file(corpus_path)
    token_lists = [rec["sentence"].split() for rec in records]
    if vocab is None:
        vocab = build_vocabulary(token_lists, min_count=min_count, dim=embedding_dim, seed=seed)
    base = corpus_path.parent
    examples = []
    for rec, tokens in zip(records, token_lists):
        raw = read_feature_file(base / rec["feature_path"])
        video = sample_frames(raw.features, n_max=n_max)
        sentence = encode_sentence(tokens, vocab, m_max=m_max)
        examples.append(PairExample(id=str(rec["id"]), video=video,
                                    sentence=sentence, tokens=tokens))
    return vocab, examples
