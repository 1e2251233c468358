"""Command-line entry point: data generation, training, evaluation, diagnostics.

Configuration lives in INI files with [model], [train], and [data]
sections whose keys mirror the ModelConfig, TrainConfig, and SynthConfig
fields.  --set section.key=value overrides single entries, --seed
overrides every seed at once, and unknown sections or keys are rejected.
Commands that build something echo the effective configuration into the
output directory before running, so a run can be reproduced from its
artifacts alone.

Exit codes: 0 success, 1 runtime or I/O failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    FIB,
    MATCH,
    TASK_FIB,
    TASK_MC,
    TASK_RETRIEVAL,
    ModelConfig,
    SynthConfig,
    TrainConfig,
    config_fields,
)
from .errors import (
    ConfigError,
    FormatError,
    InputError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .evaluation import (
    evaluate_fib,
    evaluate_multiple_choice,
    evaluate_retrieval,
    write_metrics_json,
    write_metrics_table,
)
from .models import (
    FibModel,
    MatchModel,
    diagnostics,
    load_model,
    save_model,
    write_pgm,
)
from .preprocess import VideoFeatureSequence, WordSequence, load_dataset
from .synthdata import (
    generate_corpus,
    load_fib_file,
    load_mc_file,
    make_fib,
    make_multiple_choice,
    write_dataset,
)
from .tensor import TRAIN, Rng
from .training import (
    fib_batch_loss,
    gradient_check,
    ranking_matrix_loss,
    train,
    write_loss_trace,
)

log = logging.getLogger(__name__)

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthConfig}

# compact geometry for gradient checking: finite differences visit every
# parameter coordinate twice, so the full-scale widths are out of reach
_GRADCHECK_BASE = dict(
    vocab_size=21, n_max=6, m_max=6, word_dim=8, video_dim=5, lstm_hidden=4,
    video_cnn_dim=6, d1_dim=8, d2_dim=8, d3_dim=8, d4_dim=8,
    conv_channels=(8, 8, 8), conv_kernel=2, conv_strides=(1, 1, 2),
    head_dims=(8, 8, 8),
)


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def _parse_set(spec: str) -> tuple[str, str, str]:
    key, sep, value = spec.partition("=")
    if not sep:
        raise UsageError(f"--set needs section.key=value, got {spec!r}")
    section, sep, field = key.partition(".")
    if not sep or not section.strip() or not field.strip():
        raise UsageError(f"--set key must look like section.key, got {key!r}")
    section = section.strip()
    if section not in _SECTIONS:
        raise UsageError(f"unknown config section {section!r}; "
                         f"expected one of {sorted(_SECTIONS)}")
    return section, field.strip(), value.strip()


def read_overrides(config_path, set_specs) -> dict[str, dict[str, str]]:
    """Merge an INI file and --set entries into raw per-section strings."""
    raw: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if config_path:
        parser = configparser.ConfigParser()
        with open(config_path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]; "
                                  f"expected one of {sorted(_SECTIONS)}")
            raw[section].update(parser[section])
    for spec in set_specs or []:
        section, field, value = _parse_set(spec)
        raw[section][field] = value
    return raw


def _coerce(section: str, key: str, value: str, template):
    """Parse a raw string as the type of the template (a field default)."""
    try:
        if isinstance(template, bool):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        if isinstance(template, tuple):
            parts = value.replace(",", " ").split()
            return tuple(int(p) for p in parts)
        return value
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def build_config(cls, section: str, raw: dict, **forced):
    """Instantiate a config dataclass from raw strings plus forced fields."""
    valid = config_fields(cls)
    defaults = cls()
    kwargs = {}
    for key, value in raw.get(section, {}).items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in [{section}]; "
                              f"valid keys: {', '.join(valid)}")
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    kwargs.update({k: v for k, v in forced.items() if v is not None})
    return cls(**kwargs)


def write_effective_config(path, **sections):
    """Echo the fully resolved configuration as a reloadable INI file."""
    parser = configparser.ConfigParser()
    for name in ("model", "train", "data"):
        cfg = sections.get(name)
        if cfg is None:
            continue
        parser[name] = {}
        for field in dataclasses.fields(cfg):
            value = getattr(cfg, field.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            parser[name][field.name] = str(value)
    with Path(path).open("w", encoding="utf-8") as fh:
        parser.write(fh)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = read_overrides(args.config, args.set)
    data_cfg = build_config(SynthConfig, "data", raw, seed=args.seed).validate()
    out = _prepare_out(args)
    write_effective_config(out / "config.ini", data=data_cfg)
    dataset = generate_corpus(data_cfg)
    mc_items = make_multiple_choice(dataset, seed=data_cfg.seed) \
        if len(dataset.examples) >= 5 else None
    fib_items, skipped = make_fib(dataset, seed=data_cfg.seed, per_sentence=2)
    write_dataset(dataset, out, mc_items=mc_items, fib_items=fib_items)
    print(f"wrote {len(dataset.examples)} pairs "
          f"(vocabulary {dataset.vocab.size} entries) to {out}")
    print(f"multiple choice: {len(mc_items) if mc_items else 0} items; "
          f"fill-in-the-blank: {len(fib_items)} items "
          f"({skipped} one-word sentences skipped)")
    return 0


def _resolve_model_config(raw: dict, task: str, vocab_size: int) -> ModelConfig:
    """Apply corpus-derived sizes, catching explicit contradictions."""
    cfg = build_config(ModelConfig, "model", raw)
    explicit = raw.get("model", {})
    wanted_variant = FIB if task == TASK_FIB else MATCH
    if "variant" in explicit and cfg.variant != wanted_variant:
        raise ConfigError(f"task {task!r} needs a {wanted_variant!r}-variant model, "
                          f"but [model] variant is {cfg.variant!r}")
    cfg = replace(cfg, variant=wanted_variant)
    if "vocab_size" in explicit and cfg.vocab_size != vocab_size:
        raise ConfigError(f"[model] vocab_size is {cfg.vocab_size}, but the corpus "
                          f"vocabulary has {vocab_size} entries including the blank")
    if cfg.variant == FIB and "output_dim" in explicit and cfg.output_dim != vocab_size:
        raise ConfigError(f"the output layer width (vocabulary logits) is set to "
                          f"{cfg.output_dim}, but the corpus vocabulary has "
                          f"{vocab_size} entries; these must match")
    return cfg.with_vocab(vocab_size).validate()


def cmd_train(args) -> int:
    raw = read_overrides(args.config, args.set)
    train_cfg = build_config(TrainConfig, "train", raw, seed=args.seed).validate()
    data_dir = Path(args.data)
    probe_cfg = build_config(ModelConfig, "model", raw)
    vocab, examples = load_dataset(data_dir / "corpus.jsonl", vocab=None,
                                   min_count=1, embedding_dim=probe_cfg.word_dim,
                                   m_max=probe_cfg.m_max, n_max=probe_cfg.n_max,
                                   seed=train_cfg.seed)
    model_cfg = _resolve_model_config(raw, train_cfg.task, vocab.size)
    out = _prepare_out(args)
    write_effective_config(out / "config.ini", model=model_cfg, train=train_cfg)

    if train_cfg.task == TASK_RETRIEVAL:
        items = examples
        model = MatchModel(model_cfg, Rng(train_cfg.seed), embeddings=vocab.embeddings)
    elif train_cfg.task == TASK_MC:
        items = load_mc_file(data_dir / "mc.jsonl", vocab,
                             m_max=model_cfg.m_max, n_max=model_cfg.n_max)
        model = MatchModel(model_cfg, Rng(train_cfg.seed), embeddings=vocab.embeddings)
    else:
        items = load_fib_file(data_dir / "fib.jsonl", vocab,
                              m_max=model_cfg.m_max, n_max=model_cfg.n_max)
        model = FibModel(model_cfg, Rng(train_cfg.seed), embeddings=vocab.embeddings)

    print(f"training task {train_cfg.task!r} on {len(items)} items "
          f"for {train_cfg.epochs} epochs")
    trace = train(model, items, train_cfg, out_dir=out)
    save_model(model, out / "model.jsfm")
    write_loss_trace(trace, out / "loss_trace.csv")
    final = trace[-1].loss if trace else float("nan")
    print(f"final batch loss {final:.6f}; "
          f"wrote {out / 'model.jsfm'} and {out / 'loss_trace.csv'}")
    return 0


def _check_eval_compatibility(model, task: str, vocab_size: int):
    needed = FIB if task == TASK_FIB else MATCH
    if model.config.variant != needed:
        raise ConfigError(f"task {task!r} needs a {needed!r}-variant checkpoint, "
                          f"got {model.config.variant!r}")
    if task == TASK_FIB and model.config.output_dim != vocab_size:
        raise ConfigError(f"checkpoint output layer width (vocabulary logits) is "
                          f"{model.config.output_dim}, but the corpus vocabulary "
                          f"has {vocab_size} entries; these must match")
    if model.config.vocab_size != vocab_size:
        raise ConfigError(f"checkpoint vocabulary size is {model.config.vocab_size}, "
                          f"but the corpus vocabulary has {vocab_size} entries")


def cmd_eval(args) -> int:
    model = load_model(args.model)
    cfg = model.config
    data_dir = Path(args.data)
    vocab, examples = load_dataset(data_dir / "corpus.jsonl", vocab=None,
                                   min_count=1, embedding_dim=cfg.word_dim,
                                   m_max=cfg.m_max, n_max=cfg.n_max, seed=0)
    _check_eval_compatibility(model, args.task, vocab.size)
    if args.task == TASK_RETRIEVAL:
        metrics = evaluate_retrieval(model, examples)
    elif args.task == TASK_MC:
        items = load_mc_file(data_dir / "mc.jsonl", vocab,
                             m_max=cfg.m_max, n_max=cfg.n_max)
        metrics = evaluate_multiple_choice(model, items)
    else:
        items = load_fib_file(data_dir / "fib.jsonl", vocab,
                              m_max=cfg.m_max, n_max=cfg.n_max)
        metrics = evaluate_fib(model, items)
    out = _prepare_out(args)
    write_metrics_json(metrics, out / "metrics.json")
    write_metrics_table(metrics, out / "metrics.txt")
    for key in sorted(metrics):
        print(f"{key} {metrics[key]:.4f}")
    return 0


def _gradcheck_inputs(cfg: ModelConfig, rng: Rng, batch: int, blanks: bool):
    videos = [VideoFeatureSequence(rng.normal((cfg.n_max, cfg.video_dim)))
              for _ in range(batch)]
    sentences = []
    for i in range(batch):
        length = cfg.m_max - (i % 2)
        ids = rng.integers(1, cfg.vocab_size, size=length).astype(np.int64)
        if blanks:
            pos = int(rng.integers(0, length))
            ids[pos] = 0
            sentences.append(WordSequence(ids, blank_position=pos))
        else:
            sentences.append(WordSequence(ids))
    return videos, sentences


def _run_gradcheck(variant: str, cfg: ModelConfig, train_cfg: TrainConfig,
                   seed: int) -> list[tuple[str, float]]:
    rng = Rng(seed)
    if variant == MATCH:
        videos, sentences = _gradcheck_inputs(cfg, rng.spawn(1), batch=3, blanks=False)
        model = MatchModel(cfg, rng.spawn(2))
        params = model.parameters()

        def build_loss():
            drop_rng = Rng(seed + 77)
            scores = model.cross_scores(videos, sentences, TRAIN, dropout_rng=drop_rng)
            return ranking_matrix_loss(scores, train_cfg.margin,
                                       train_cfg.weight_decay, params)
    else:
        videos, sentences = _gradcheck_inputs(cfg, rng.spawn(1), batch=2, blanks=True)
        targets = [int(rng.spawn(3).integers(1, cfg.vocab_size)) for _ in range(2)]
        model = FibModel(cfg, rng.spawn(2))
        params = model.parameters()

        def build_loss():
            drop_rng = Rng(seed + 77)
            logits = model.logits(videos, sentences, TRAIN, dropout_rng=drop_rng)
            return fib_batch_loss(logits, targets, train_cfg.weight_decay, params)

    return gradient_check(build_loss, params)


def cmd_gradcheck(args) -> int:
    raw = read_overrides(args.config, args.set)
    train_cfg = build_config(TrainConfig, "train", raw, seed=args.seed).validate()
    base = ModelConfig(**_GRADCHECK_BASE)
    valid = config_fields(ModelConfig)
    for key, value in raw.get("model", {}).items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in [model]; "
                              f"valid keys: {', '.join(valid)}")
        base = replace(base, **{key: _coerce("model", key, value, getattr(base, key))})

    match_cfg = replace(base, variant=MATCH, output_dim=1).validate()
    fib_cfg = replace(base, variant=FIB, output_dim=base.vocab_size).validate()
    seed = args.seed if args.seed is not None else train_cfg.seed

    worst_name, worst = "", 0.0
    for label, variant, cfg in (("matching loss", MATCH, match_cfg),
                                ("cross-entropy loss", FIB, fib_cfg)):
        report = _run_gradcheck(variant, cfg, train_cfg, seed)
        print(f"{label}: {len(report)} parameter groups")
        for name, err in report:
            print(f"  {name:<28s} {err:.3e}")
            if err > worst:
                worst_name, worst = f"{label} / {name}", err
    print(f"worst relative error {worst:.3e} in {worst_name} "
          f"(tolerance {args.tolerance:.1e})")
    if worst >= args.tolerance:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


def cmd_dump_attention(args) -> int:
    model = load_model(args.model)
    cfg = model.config
    data_dir = Path(args.data)
    vocab, examples = load_dataset(data_dir / "corpus.jsonl", vocab=None,
                                   min_count=1, embedding_dim=cfg.word_dim,
                                   m_max=cfg.m_max, n_max=cfg.n_max, seed=0)
    if isinstance(model, FibModel):
        items = load_fib_file(data_dir / "fib.jsonl", vocab,
                              m_max=cfg.m_max, n_max=cfg.n_max)
        pool = {it.id: (it.video, it.sentence) for it in items}
    else:
        pool = {ex.id: (ex.video, ex.sentence) for ex in examples}
    item_id = args.item if args.item is not None else next(iter(pool))
    if item_id not in pool:
        raise InputError(f"item {item_id!r} not found; "
                         f"available ids start with {list(pool)[:3]}")
    video, sentence = pool[item_id]
    maps = diagnostics(model, video, sentence)
    if not maps:
        raise InputError("this checkpoint has gating disabled; no maps to dump")
    out = _prepare_out(args)
    for key in sorted(maps):
        path = out / f"{key}.pgm"
        write_pgm(path, maps[key])
        print(f"wrote {path} ({maps[key].shape[0]}x{maps[key].shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser, out_required=True):
    parser.add_argument("--config", metavar="PATH",
                        help="INI file with [model]/[train]/[data] sections")
    parser.add_argument("--set", action="append", metavar="SEC.KEY=VALUE",
                        help="override one config entry (repeatable)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed in the configuration")
    if out_required:
        parser.add_argument("--out", required=True, metavar="DIR",
                            help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jsfusion",
        description="Hierarchical video-sentence matching: synthetic data, "
                    "training, evaluation, and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic aligned corpus")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR",
                   help="dataset directory from gen-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", required=True, metavar="CKPT",
                   help="checkpoint file from train")
    p.add_argument("--task", choices=[TASK_RETRIEVAL, TASK_MC, TASK_FIB],
                   default=TASK_RETRIEVAL)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare tape gradients with finite differences "
                            "on a compact geometry")
    _add_common(p, out_required=False)
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="maximum accepted relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention",
                       help="write attention and convolution gate maps as PGM images")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--item", default=None, help="example id (default: first)")
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ConfigError, InputError, FormatError, ShapeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
