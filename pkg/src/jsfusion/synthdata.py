"""Synthetic corpora with a planted word-to-frame alignment.

Each sentence is a random word sequence; each word emits a run of one to
a few frames whose features are a fixed random linear map of the word's
latent vector plus Gaussian noise.  The alignment is therefore exact by
construction, and a model only has to discover the word-frame
correspondence to match sentences with videos.  Every vocabulary word is
guaranteed to occur at least once so the vocabulary built back from the
corpus has exactly the configured size.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .errors import InputError
from .preprocess import (
    BLANK,
    BLANK_INDEX,
    PairExample,
    VideoFeatureSequence,
    Vocabulary,
    WordSequence,
    build_vocabulary,
    encode_sentence,
    read_feature_file,
    sample_frames,
    write_corpus_file,
    write_feature_file,
)
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class SyntheticDataset:
    config: SynthConfig
    vocab: Vocabulary
    examples: list[PairExample]


@dataclass
class McItem:
    """A video with five candidate sentences, one of them true."""

    id: str
    video: VideoFeatureSequence
    choices: list[WordSequence]
    answer: int

    def __post_init__(self):
        if len(self.choices) != 5:
            raise InputError(f"item {self.id!r} has {len(self.choices)} choices, expected 5")
        if not (0 <= self.answer < 5):
            raise InputError(f"item {self.id!r} answer {self.answer} out of range")


@dataclass
class FibItem:
    """A video with a one-slot-blanked sentence and the hidden word's index."""

    id: str
    video: VideoFeatureSequence
    sentence: WordSequence
    target: int

    def __post_init__(self):
        if self.sentence.blank_position is None:
            raise InputError(f"item {self.id!r} sentence has no blank slot")
        if self.target == BLANK_INDEX:
            raise InputError(f"item {self.id!r} target cannot be the blank index")


def _word_string(i: int) -> str:
    return f"w{i:03d}"


def generate_corpus(cfg: SynthConfig) -> SyntheticDataset:
    """Sample aligned (video, sentence) pairs; deterministic in cfg.seed."""
    cfg.validate()
    rng = Rng(cfg.seed)
    word_rng = rng.spawn(1)
    frame_rng = rng.spawn(2)
    latents = rng.spawn(3).normal((cfg.vocab_size, cfg.latent_dim))
    projection = rng.spawn(4).normal((cfg.latent_dim, cfg.feature_dim))
    projection = projection / np.sqrt(cfg.latent_dim)

    lo, hi = cfg.sentence_len
    word_ids = [list(word_rng.integers(0, cfg.vocab_size,
                                       size=int(word_rng.integers(lo, hi + 1))))
                for _ in range(cfg.corpus_size)]

    # substitute unseen words into random slots so coverage is total
    used = set()
    for ids in word_ids:
        used.update(int(w) for w in ids)
    missing = [w for w in range(cfg.vocab_size) if w not in used]
    if len(missing) > sum(len(ids) for ids in word_ids):
        raise InputError(
            f"corpus too small to cover {cfg.vocab_size} words: "
            f"only {sum(len(ids) for ids in word_ids)} slots")
    for k, w in enumerate(missing):
        ids = word_ids[k % cfg.corpus_size]
        ids[int(word_rng.integers(0, len(ids)))] = w

    token_lists = [[_word_string(int(w)) for w in ids] for ids in word_ids]
    vocab = build_vocabulary(token_lists, min_count=1, dim=cfg.embedding_dim,
                             seed=cfg.seed)

    flo, fhi = cfg.frames_per_word
    examples = []
    for idx, (ids, tokens) in enumerate(zip(word_ids, token_lists)):
        runs = []
        for w in ids:
            n_frames = int(frame_rng.integers(flo, fhi + 1))
            base = latents[int(w)] @ projection
            noise = cfg.noise * frame_rng.normal((n_frames, cfg.feature_dim))
            runs.append(base[None, :] + noise)
        feats = np.concatenate(runs, axis=0)
        video = sample_frames(feats, n_max=cfg.n_max)
        sentence = encode_sentence(tokens, vocab, m_max=cfg.m_max)
        examples.append(PairExample(id=f"item{idx:04d}", video=video,
                                    sentence=sentence, tokens=tokens))
    return SyntheticDataset(config=cfg, vocab=vocab, examples=examples)


def make_multiple_choice(dataset: SyntheticDataset, seed: int = 0,
                         n_items: int | None = None) -> list[McItem]:
    """One item per example: its sentence hidden among four foreign sentences.

    The answer position is drawn uniformly so position statistics carry
    no signal.  Distractors are sampled without replacement from other
    examples, skipping any sentence identical to the true one.
    """
    examples = dataset.examples
    if len(examples) < 5:
        raise InputError(f"multiple choice needs at least 5 examples, got {len(examples)}")
    rng = Rng(seed)
    count = len(examples) if n_items is None else min(n_items, len(examples))
    items = []
    for idx in range(count):
        gt = examples[idx].sentence
        gt_key = tuple(gt.token_ids)
        pool = [j for j in range(len(examples))
                if j != idx and tuple(examples[j].sentence.token_ids) != gt_key]
        if len(pool) < 4:
            raise InputError(f"not enough distinct distractors for item {idx}")
        picked = rng.choice(len(pool), size=4, replace=False)
        distractors = [examples[pool[j]].sentence for j in picked]
        answer = int(rng.integers(0, 5))
        choices = distractors[:answer] + [gt] + distractors[answer:]
        items.append(McItem(id=examples[idx].id, video=examples[idx].video,
                            choices=choices, answer=answer))
    return items


def make_fib(dataset: SyntheticDataset, seed: int = 0,
             per_sentence: int = 1) -> tuple[list[FibItem], int]:
    """Blank uniformly chosen slots; returns (items, skipped_sentence_count).

    Sentences of length one are skipped (blanking them would leave no
    context).  per_sentence asks for that many distinct blank positions
    per example, capped by the sentence length.
    """
    if per_sentence < 1:
        raise InputError(f"per_sentence must be >= 1, got {per_sentence}")
    rng = Rng(seed)
    items = []
    skipped = 0
    for ex in dataset.examples:
        n = len(ex.sentence)
        if n < 2:
            skipped += 1
            continue
        k = min(per_sentence, n)
        positions = rng.choice(n, size=k, replace=False)
        for j, pos in enumerate(sorted(int(p) for p in positions)):
            ids = ex.sentence.token_ids.copy()
            target = int(ids[pos])
            ids[pos] = BLANK_INDEX
            blanked = WordSequence(ids, blank_position=pos)
            items.append(FibItem(id=f"{ex.id}-b{j}", video=ex.video,
                                 sentence=blanked, target=target))
    if skipped:
        log.warning("skipped %d length-1 sentences when blanking", skipped)
    return items, skipped


# ---------------------------------------------------------------------------
# On-disk corpus layout
# ---------------------------------------------------------------------------


def write_dataset(dataset: SyntheticDataset, out_dir,
                  mc_items: list[McItem] | None = None,
                  fib_items: list[FibItem] | None = None):
    """Write corpus.jsonl, features/, and optional mc.jsonl / fib.jsonl."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for ex in dataset.examples:
        rel = f"features/{ex.id}.jsfv"
        write_feature_file(out / rel, ex.video)
        records.append({"id": ex.id, "sentence": " ".join(ex.tokens),
                        "feature_path": rel})
    write_corpus_file(out / "corpus.jsonl", records)
    manifest = {"config": dataclasses.asdict(dataset.config),
                "vocab_size": dataset.vocab.size,
                "examples": len(dataset.examples)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    vocab = dataset.vocab
    if mc_items is not None:
        with (out / "mc.jsonl").open("w", encoding="utf-8") as fh:
            for it in mc_items:
                rec = {"id": it.id, "feature_path": f"features/{it.id}.jsfv",
                       "choices": [" ".join(vocab.word(int(i)) for i in c.token_ids)
                                   for c in it.choices],
                       "answer": it.answer}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if fib_items is not None:
        with (out / "fib.jsonl").open("w", encoding="utf-8") as fh:
            for it in fib_items:
                words = [vocab.word(int(i)) if i != BLANK_INDEX else BLANK
                         for i in it.sentence.token_ids]
                base_id = it.id.rsplit("-b", 1)[0]
                rec = {"id": it.id, "feature_path": f"features/{base_id}.jsfv",
                       "sentence": " ".join(words),
                       "target": vocab.word(it.target)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_task_records(path) -> list[dict]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                from .errors import FormatError
                raise FormatError(f"{path}, line {lineno}: invalid JSON ({exc})") from None
    return records


def load_mc_file(path, vocab: Vocabulary, m_max: int = 40, n_max: int = 40) -> list[McItem]:
    path = Path(path)
    base = path.parent
    items = []
    for rec in _load_task_records(path):
        raw = read_feature_file(base / rec["feature_path"])
        video = sample_frames(raw.features, n_max=n_max)
        choices = [encode_sentence(s.split(), vocab, m_max=m_max) for s in rec["choices"]]
        items.append(McItem(id=str(rec["id"]), video=video, choices=choices,
                            answer=int(rec["answer"])))
    return items


def load_fib_file(path, vocab: Vocabulary, m_max: int = 40, n_max: int = 40) -> list[FibItem]:
    path = Path(path)
    base = path.parent
    items = []
    for rec in _load_task_records(path):
        raw = read_feature_file(base / rec["feature_path"])
        video = sample_frames(raw.features, n_max=n_max)
        sentence = encode_sentence(rec["sentence"].split(), vocab, m_max=m_max)
        if sentence.blank_position is None:
            raise InputError(f"fib item {rec['id']!r} has no {BLANK} marker")
        target = vocab.index(rec["target"])
        items.append(FibItem(id=str(rec["id"]), video=video, sentence=sentence,
                             target=target))
    return items
