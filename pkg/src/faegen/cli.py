"""Command-line pipeline: synthesize data, train, gradient-check, generate,
and evaluate.

Every subcommand writes a manifest (resolved configuration, seeds, input
and output paths, tool version) alongside its outputs; re-running with
the flags recorded there reproduces the outputs byte for byte.  All
randomness flows from explicitly flagged seeds.

Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numerical
abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .corpus import (
    Dataset,
    SynthConfig,
    Vocabulary,
    atomic_write_text,
    build_vocab,
    dataset_to_jsonl,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .decoder import DecodeConfig, generate_report
from .metrics import build_pairs, evaluate
from .model import FaeGenConfig
from .trainer import (
    Checkpoint,
    NumericalError,
    TrainConfig,
    format_loss_log,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _resolve(defaults: dict, config_path, args, keys) -> dict:
    """Materialize configuration: defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}")
        unknown = [k for k in file_cfg if k not in defaults]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(file_cfg)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: str, subcommand: str, resolved: dict,
                    inputs: dict, outputs: list) -> None:
    manifest = {
        "tool": "faegen",
        "version": __version__,
        "subcommand": subcommand,
        "config": resolved,
        "inputs": inputs,
        "outputs": outputs,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "train": 200,
    "test": 50,
    "seed": 0,
    "feature_dim": 32,
    "noise": 0.3,
    "concentration": 4.0,
    "missing": 0.15,
    "repeat": 0.15,
    "min_count": 1,
}


def cmd_synth(args) -> int:
    cfg = _resolve(SYNTH_DEFAULTS, args.config, args, SYNTH_DEFAULTS.keys())
    if cfg["train"] < 1:
        raise UsageError("--train must be >= 1")
    if cfg["test"] < 0:
        raise UsageError("--test must be >= 0")
    synth = SynthConfig(
        num_train=cfg["train"],
        num_test=cfg["test"],
        feature_dim=cfg["feature_dim"],
        feature_noise=cfg["noise"],
        view_concentration=cfg["concentration"],
        missing_prob=cfg["missing"],
        repeat_prob=cfg["repeat"],
        seed=cfg["seed"],
    )
    try:
        synth.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    train_set, test_set = synth_generate(synth)
    vocab = build_vocab(train_set, min_count=cfg["min_count"])
    out = args.out
    save_dataset(os.path.join(out, "train.jsonl"), train_set)
    save_dataset(os.path.join(out, "test.jsonl"), test_set)
    vocab.save(os.path.join(out, "vocab.json"))
    _write_manifest(out, "synth", cfg, {}, ["train.jsonl", "test.jsonl", "vocab.json"])
    print(f"wrote {len(train_set)} train / {len(test_set)} test samples, "
          f"vocab {len(vocab)} tokens -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "hidden": 512,
    "topic_factor_dim": 10,
    "max_len": 30,
    "attention": "factored",
    "embedding": "factored",
    "topic_factor_shape": "full",
    "epochs": 60,
    "lr": 1e-3,
    "clip": 5.0,
    "seed": 0,
    "log_interval": 1,
}


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args.config, args, TRAIN_DEFAULTS.keys())
    if cfg["epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise UsageError(f"empty dataset: {args.data}")
    vocab = Vocabulary.load(args.vocab)
    topics = dataset.topics()
    first = dataset.samples[0]
    model_config = FaeGenConfig(
        vocab_size=len(vocab),
        num_topics=len(topics),
        feature_dim=len(first.observations[0].features),
        hidden_dim=cfg["hidden"],
        num_views=len(first.observations[0].view_probs),
        topic_factor_dim=cfg["topic_factor_dim"],
        max_len=cfg["max_len"],
        attention_mode=cfg["attention"],
        embedding_mode=cfg["embedding"],
        topic_factor_shape=cfg["topic_factor_shape"],
    )
    train_config = TrainConfig(
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        clip_norm=cfg["clip"],
        seed=cfg["seed"],
        log_interval=cfg["log_interval"],
    )
    try:
        model_config.validate()
        train_config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))

    def progress(epoch, nll):
        print(f"epoch {epoch}: mean per-token nll {nll:.6f}")

    result = train(dataset, vocab, model_config, train_config,
                   topics=topics, progress=progress)
    ckpt = Checkpoint(
        config=model_config,
        params=result.params,
        vocab=vocab,
        topics=topics,
        metadata={
            "epochs": cfg["epochs"],
            "final_mean_nll": result.epoch_log[-1][1],
            "seed": cfg["seed"],
        },
    )
    out = args.out
    save_checkpoint(os.path.join(out, "checkpoint.json"), ckpt)
    atomic_write_text(os.path.join(out, "loss_log.txt"), format_loss_log(result.epoch_log))
    _write_manifest(out, "train", cfg,
                    {"data": args.data, "vocab": args.vocab},
                    ["checkpoint.json", "loss_log.txt"])
    print(f"final mean per-token nll {result.epoch_log[-1][1]:.6f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_DEFAULTS = {
    "hidden": 8,
    "feature_dim": 6,
    "vocab_size": 20,
    "views": 3,
    "topic_factor_dim": 4,
    "topics": 2,
    "observations": 3,
    "seq_len": 5,
    "seed": 1,
    "fd_step": 1e-5,
    "threshold": 1e-4,
    "attention": "factored",
    "embedding": "factored",
    "topic_factor_shape": "full",
}


def cmd_gradcheck(args) -> int:
    cfg = _resolve(GRADCHECK_DEFAULTS, args.config, args, GRADCHECK_DEFAULTS.keys())
    model_config = FaeGenConfig(
        vocab_size=cfg["vocab_size"],
        num_topics=cfg["topics"],
        feature_dim=cfg["feature_dim"],
        hidden_dim=cfg["hidden"],
        num_views=cfg["views"],
        topic_factor_dim=cfg["topic_factor_dim"],
        max_len=max(cfg["seq_len"], 1),
        attention_mode=cfg["attention"],
        embedding_mode=cfg["embedding"],
        topic_factor_shape=cfg["topic_factor_shape"],
    )
    try:
        model_config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    report = grad_check(
        model_config,
        seed=cfg["seed"],
        fd_step=cfg["fd_step"],
        seq_len=cfg["seq_len"],
        num_observations=cfg["observations"],
    )
    width = max(len(name) for name in report)
    print(f"{'parameter group'.ljust(width)}  max relative error")
    for name, err in report.items():
        print(f"{name.ljust(width)}  {err:.3e}")
    offenders = [name for name, err in report.items() if err >= cfg["threshold"]]
    if offenders:
        print(f"FAIL: {len(offenders)} group(s) at or above {cfg['threshold']:g}: "
              + ", ".join(offenders))
        return EXIT_CHECK_FAILED
    print(f"OK: all {len(report)} groups below {cfg['threshold']:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "mode": "greedy",
    "beam": 3,
    "max_len": None,
    "temperature": 1.0,
    "seed": 0,
}


def cmd_generate(args) -> int:
    cfg = _resolve(GENERATE_DEFAULTS, args.config, args, GENERATE_DEFAULTS.keys())
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise UsageError(f"empty dataset: {args.data}")
    first = dataset.samples[0]
    if len(first.observations[0].features) != ckpt.config.feature_dim:
        raise UsageError(
            f"feature dim mismatch: data {len(first.observations[0].features)} "
            f"vs checkpoint {ckpt.config.feature_dim}"
        )
    if len(first.observations[0].view_probs) != ckpt.config.num_views:
        raise UsageError(
            f"view count mismatch: data {len(first.observations[0].view_probs)} "
            f"vs checkpoint {ckpt.config.num_views}"
        )
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        if vocab.tokens != ckpt.vocab.tokens:
            raise UsageError(
                f"vocabulary mismatch: {args.vocab} has {len(vocab)} tokens, "
                f"checkpoint embeds {len(ckpt.vocab)}"
            )
    decode_config = DecodeConfig(
        mode=cfg["mode"],
        beam_width=cfg["beam"],
        max_len=cfg["max_len"] if cfg["max_len"] else ckpt.config.max_len,
        temperature=cfg["temperature"],
        seed=cfg["seed"],
    )
    try:
        decode_config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))

    lines = []
    for sample in sorted(dataset.samples, key=lambda s: s.id):
        report = generate_report(ckpt.params, ckpt.config, sample, ckpt.vocab,
                                 ckpt.topics, decode_config)
        for topic in ckpt.topics:
            text, score = report[topic]
            lines.append(json.dumps(
                {"id": sample.id, "topic": topic, "text": text, "score": score}
            ))
    out = args.out
    atomic_write_text(out, "".join(line + "\n" for line in lines))
    _write_manifest(os.path.dirname(os.path.abspath(out)) or ".", "generate", cfg,
                    {"checkpoint": args.checkpoint, "data": args.data},
                    [os.path.basename(out)])
    print(f"wrote {len(lines)} hypotheses -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    hyp_records = []
    with open(args.hyp, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                hyp_records.append(json.loads(line))
    if not hyp_records:
        raise UsageError(f"empty hypothesis file: {args.hyp}")
    ref_dataset = load_dataset(args.ref)
    try:
        pairs = build_pairs(hyp_records, ref_dataset)
    except ValueError as exc:
        raise UsageError(str(exc))
    report = evaluate(pairs, per_topic=args.per_topic)
    s = report.scores
    print("       B-1     B-2     B-3     B-4     C       M       R")
    print("all    " + "  ".join(
        f"{s[k]:.4f}" if k != "cider" else f"{s[k]:.4f}"
        for k in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "cider", "meteor", "rouge_l")
    ))
    if args.per_topic:
        for topic, ts in report.per_topic.items():
            print(f"{topic[:6].ljust(6)} " + "  ".join(
                f"{ts[k]:.4f}"
                for k in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "cider", "meteor", "rouge_l")
            ))
    if args.out:
        atomic_write_text(args.out, json.dumps(report.to_dict(), indent=1) + "\n")
        print(f"report -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faegen",
        description="multi-view topic-conditioned report generation pipeline",
    )
    parser.add_argument("--version", action="version", version=f"faegen {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--train", type=int, help="number of training samples")
    p.add_argument("--test", type=int, help="number of test samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--noise", type=float, help="feature noise sigma")
    p.add_argument("--concentration", type=float, help="view confidence concentration")
    p.add_argument("--missing", type=float, help="missing-view probability")
    p.add_argument("--repeat", type=float, help="repeat-view probability")
    p.add_argument("--min-count", dest="min_count", type=int, help="vocabulary threshold")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--hidden", type=int)
    p.add_argument("--topic-factor-dim", dest="topic_factor_dim", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--attention", choices=["factored", "plain", "mean_pool"])
    p.add_argument("--embedding", choices=["factored", "shared"])
    p.add_argument("--topic-factor-shape", dest="topic_factor_shape",
                   choices=["full", "diagonal"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-interval", dest="log_interval", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--hidden", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--topic-factor-dim", dest="topic_factor_dim", type=int)
    p.add_argument("--topics", type=int)
    p.add_argument("--observations", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fd-step", dest="fd_step", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--attention", choices=["factored", "plain", "mean_pool"])
    p.add_argument("--embedding", choices=["factored", "shared"])
    p.add_argument("--topic-factor-shape", dest="topic_factor_shape",
                   choices=["full", "diagonal"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate", help="decode reports from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL to describe")
    p.add_argument("--out", required=True, help="hypotheses JSONL path")
    p.add_argument("--vocab", help="optional vocabulary file to cross-check")
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--mode", choices=["greedy", "beam", "sample"])
    p.add_argument("--beam", type=int, help="beam width")
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--hyp", required=True, help="hypotheses JSONL")
    p.add_argument("--ref", required=True, help="reference dataset JSONL")
    p.add_argument("--per-topic", dest="per_topic", action="store_true")
    p.add_argument("--out", help="write the full score report JSON here")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
