"""Command-line entry point: dataset synthesis, training, evaluation,
and embedding/attention export.

Exit codes: 0 success, 1 usage or configuration, 2 data format,
3 numeric abort, 4 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    build_vocab,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DimensionError,
    LabelError,
    NumericError,
    VocabError,
)
from .model import AlignFuseModel, ModelConfig
from .tensor import no_grad
from .train import (
    AdamW,
    TrainConfig,
    dataset_corpus,
    evaluate,
    load_model_checkpoint,
    modality_gap,
    predict,
    prepare_examples,
    save_model_checkpoint,
    train_steps,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit, so the exit-code
    policy lives in one place."""

    def error(self, message):
        raise UsageError(message)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration


def load_run_config(config_path: str | None,
                    seed_override: int | None) -> tuple[ModelConfig, TrainConfig]:
    """JSON file with optional "model" and "train" sections; every field
    falls back to its dataclass default. --seed beats the file."""
    raw = {}
    if config_path is not None:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {p} must contain a JSON object")
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        model_cfg = ModelConfig.from_dict(raw.get("model", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}")
    if seed_override is not None:
        train_cfg.seed = seed_override
    return model_cfg, train_cfg


def write_run_manifest(out_dir: Path, command: str, dataset: str | None,
                       model_cfg: ModelConfig, train_cfg: TrainConfig,
                       extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "dataset": str(Path(dataset).resolve()) if dataset else None,
        "out_dir": str(out_dir.resolve()),
        "seed": train_cfg.seed,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "checksums": {},
    }
    if dataset:
        ds = Path(dataset)
        mpath = ds / "manifest.jsonl" if ds.is_dir() else ds
        if mpath.is_file():
            manifest["checksums"]["dataset_manifest"] = sha256_file(mpath)
    if extra:
        manifest.update(extra)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    records = generate_synthetic_dataset(
        args.n, args.classes, side=args.side,
        missing_rate=args.missing_rate, seed=args.seed)
    out_dir = Path(args.out)
    save_dataset(records, out_dir)
    counts: dict[int, int] = {}
    for rec in records:
        counts[rec.label] = counts.get(rec.label, 0) + 1
    for label in sorted(counts):
        print(f"class {label}: {counts[label]} records")
    print(f"wrote {len(records)} records to {out_dir}")
    return EXIT_OK


def _load_examples(dataset: str, model: AlignFuseModel, vocab):
    records = load_dataset(Path(dataset))
    return prepare_examples(records, vocab, model.config)


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config, args.seed)
    records = load_dataset(Path(args.dataset))
    labels = {r.label for r in records}
    if labels and max(labels) >= model_cfg.n_classes:
        raise ConfigError(
            f"dataset has label {max(labels)} but model expects "
            f"{model_cfg.n_classes} classes")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    vocab = build_vocab(dataset_corpus(records), max_size=model_cfg.vocab_size)
    model = AlignFuseModel(model_cfg, seed=train_cfg.seed)
    examples = prepare_examples(records, vocab, model_cfg)
    optim = AdamW(model.params, train_cfg)

    write_run_manifest(out_dir, "train", args.dataset, model_cfg, train_cfg)

    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    best = {"accuracy": -1.0}
    last_wall = time.monotonic()

    def eval_and_track():
        report = evaluate(model, examples)
        if report.accuracy > best["accuracy"]:
            best["accuracy"] = report.accuracy
            save_model_checkpoint(out_dir / "best.ckpt", model, vocab, optim)
        return report

    with open(metrics_path, "w") as mfh, open(timings_path, "w") as tfh:
        def on_step(entry):
            nonlocal last_wall
            mfh.write(json.dumps(entry, sort_keys=True) + "\n")
            now = time.monotonic()
            tfh.write(json.dumps(
                {"step": entry["step"],
                 "wall_ms": (now - last_wall) * 1000.0}) + "\n")
            last_wall = now
            if (entry["step"] + 1) % train_cfg.eval_every == 0:
                eval_and_track()

        log = train_steps(model, optim, examples, train_cfg, on_step=on_step)

    report = eval_and_track()
    save_model_checkpoint(out_dir / "final.ckpt", model, vocab, optim)
    summary = {
        "steps": optim.t,
        "final_total_loss": log[-1]["l_total"] if log else None,
        "train_accuracy": report.accuracy,
        "best_train_accuracy": best["accuracy"],
    }
    (out_dir / "train_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab, _ = load_model_checkpoint(Path(args.checkpoint))
    examples = _load_examples(args.dataset, model, vocab)
    report = evaluate(model, examples)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        if out.is_dir() or args.out.endswith("/"):
            out.mkdir(parents=True, exist_ok=True)
            out = out / "eval_report.json"
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    model, vocab, _ = load_model_checkpoint(Path(args.checkpoint))
    examples = _load_examples(args.dataset, model, vocab)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.what == "embeddings":
        probs, z_img, z_txt = predict(model, examples)
        path = out_dir / "embeddings.jsonl"
        with open(path, "w") as fh:
            for i, ex in enumerate(examples):
                fh.write(json.dumps({
                    "index": i,
                    "label": ex.label,
                    "z_image": z_img[i].tolist(),
                    "z_text": z_txt[i].tolist(),
                }) + "\n")
        gap = modality_gap(z_img, z_txt)
        (out_dir / "embeddings_summary.json").write_text(
            json.dumps({"modality_gap": gap, "n": len(examples)},
                       sort_keys=True) + "\n")
        print(f"modality_gap {gap:.6f} over {len(examples)} records")
    else:
        path = out_dir / "attention.jsonl"
        g = model.config.grid_side
        with open(path, "w") as fh, no_grad():
            for i, ex in enumerate(examples):
                heat, txt_w = model.extract_attention_map(ex.patches, ex.tokens)
                fh.write(json.dumps({
                    "index": i,
                    "label": ex.label,
                    "grid_side": g,
                    "image_heat": heat.reshape(g, g, g).tolist(),
                    "text_weights": txt_w.tolist(),
                }) + "\n")
        print(f"wrote attention maps for {len(examples)} records")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="alignfuse",
                     description="Train and inspect a volumetric image + "
                                 "clinical text alignment/fusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--missing-rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None,
                   help="JSON with optional 'model' and 'train' sections")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export embeddings or attention maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", choices=("embeddings", "attention"),
                   required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, VocabError, LabelError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError, DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
