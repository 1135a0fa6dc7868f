"""Command-line surface: synth, fit-stats, embed, train, eval, dump-attn, ablate.

Configuration sources compose in increasing precedence for ``train``:
built-in defaults, then the --config JSON file, then HOIDET_* environment
variables, then explicit flags. Exit codes: 0 success, 2 configuration or
validation error, 3 runtime failure.

Environment overrides use the flat field name upper-cased: HOIDET_LR,
HOIDET_EPOCHS, nested model/weights fields as HOIDET_MODEL_D,
HOIDET_WEIGHTS_BOX_L1, and so on.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    DatasetError,
    default_vocabulary,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .evaluation import (
    evaluate,
    predictions_to_detections,
    save_report,
    training_pair_counts,
)
from .heads import save_predictions
from .matching import LossWeights
from .model import ModelConfig
from .semantic import (
    OneHotProvider,
    RemoteProvider,
    TableProvider,
    build_embedding_table,
    save_embeddings,
)
from .spatial import demo_layout_stats, fit_stats, save_stats
from .training import TrainConfig, dump_attention, load_model_from_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
ENV_PREFIX = "HOIDET_"

_CONFIG_ERRORS = (ValueError, TypeError, KeyError, DatasetError,
                  FileNotFoundError, json.JSONDecodeError)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _coerce(text: str, sample):
    """Parse ``text`` to the type of ``sample`` (None samples parse as int)."""
    if isinstance(sample, bool):
        return _parse_bool(text)
    if isinstance(sample, int):
        return int(text)
    if isinstance(sample, float):
        return float(text)
    if sample is None:
        return None if text.strip().lower() in ("", "none") else int(text)
    return text


def _flag_type(sample):
    if isinstance(sample, bool):
        return _parse_bool
    if isinstance(sample, int):
        return int
    if isinstance(sample, float):
        return float
    if sample is None:
        return int
    return str


_TRAIN_DEFAULTS = TrainConfig()
_SCALAR_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)
                  if f.name not in ("weights", "model")]
_MODEL_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]
_WEIGHT_FIELDS = [f.name for f in dataclasses.fields(LossWeights)]


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    for name in _SCALAR_FIELDS:
        sample = getattr(_TRAIN_DEFAULTS, name)
        parser.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}",
                            type=_flag_type(sample), default=None)
    for name in _MODEL_FIELDS:
        sample = getattr(_TRAIN_DEFAULTS.model, name)
        parser.add_argument(f"--model-{name.replace('_', '-')}",
                            dest=f"cfgm_{name}", type=_flag_type(sample), default=None)
    for name in _WEIGHT_FIELDS:
        sample = getattr(_TRAIN_DEFAULTS.weights, name)
        parser.add_argument(f"--weights-{name.replace('_', '-')}",
                            dest=f"cfgw_{name}", type=_flag_type(sample), default=None)


def _env_overrides(doc: dict, environ) -> dict:
    """Fold HOIDET_* variables into a raw config dict (in place)."""
    for name in _SCALAR_FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            doc[name] = _coerce(environ[key], getattr(_TRAIN_DEFAULTS, name))
    for name in _MODEL_FIELDS:
        key = ENV_PREFIX + "MODEL_" + name.upper()
        if key in environ:
            doc.setdefault("model", {})[name] = _coerce(
                environ[key], getattr(_TRAIN_DEFAULTS.model, name))
    for name in _WEIGHT_FIELDS:
        key = ENV_PREFIX + "WEIGHTS_" + name.upper()
        if key in environ:
            doc.setdefault("weights", {})[name] = _coerce(
                environ[key], getattr(_TRAIN_DEFAULTS.weights, name))
    return doc


def resolve_train_config(args, environ=None) -> TrainConfig:
    """Defaults <- config file <- environment <- flags."""
    doc: dict = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    _env_overrides(doc, environ if environ is not None else os.environ)
    for name in _SCALAR_FIELDS:
        val = getattr(args, f"cfg_{name}")
        if val is not None:
            doc[name] = val
    for name in _MODEL_FIELDS:
        val = getattr(args, f"cfgm_{name}")
        if val is not None:
            doc.setdefault("model", {})[name] = val
    for name in _WEIGHT_FIELDS:
        val = getattr(args, f"cfgw_{name}")
        if val is not None:
            doc.setdefault("weights", {})[name] = val
    base = TrainConfig().to_dict()
    merged_model = {**base["model"], **doc.get("model", {})}
    merged_weights = {**base["weights"], **doc.get("weights", {})}
    merged = {**base, **doc, "model": merged_model, "weights": merged_weights}
    return TrainConfig.from_dict(merged)


def cmd_synth(args) -> int:
    vocab = default_vocabulary()
    stats = demo_layout_stats(vocab)
    dataset = synth_dataset(args.seed, args.n_images, vocab, stats,
                            image_size=args.image_size,
                            max_instances=args.max_instances)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.images)} images to {args.out}")
    return EXIT_OK


def cmd_fit_stats(args) -> int:
    dataset = load_dataset(args.data)
    stats = fit_stats(dataset, mode=args.mode)
    save_stats(stats, dataset.vocab, args.out)
    flagged = sum(1 for e in stats.pairs.values() if e.fallback)
    print(f"fitted {len(stats.pairs)} pairs ({flagged} on fallback) to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    dataset = load_dataset(args.data)
    vocab = dataset.vocab
    if args.provider == "one-hot":
        provider = OneHotProvider(vocab)
    elif args.provider == "table":
        if not args.table:
            raise ValueError("--table is required for the table provider")
        provider = TableProvider.from_file(args.table, vocab)
    else:
        if not args.endpoint:
            raise ValueError("--endpoint is required for the remote provider")
        provider = RemoteProvider(vocab, endpoint=args.endpoint,
                                  template_mode=args.mode)
    dim, entries = build_embedding_table(vocab, provider)
    save_embeddings(args.out, dim, entries)
    print(f"wrote {len(entries)} embeddings of width {dim} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    if not config.data_path:
        raise ValueError("a dataset is required: set data_path (or --data-path)")
    result = train(config, args.out, resume=args.resume)
    print(f"final train mAP {result.best_map:.4f}; "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, bundle = load_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    detections = []
    per_image = {}
    for ann in dataset.images:
        out = model(ann.pixels, image_id=ann.image_id)
        per_image[ann.image_id] = out.predictions
        detections.extend(predictions_to_detections(ann.image_id, out.predictions))
    rare = None
    if args.class_mode == "pair":
        rare = training_pair_counts(dataset.images, dataset.vocab)
    report = evaluate(detections, dataset.images, dataset.vocab,
                      scenario=args.scenario, class_mode=args.class_mode,
                      rare_counts=rare)
    save_report(report, args.report, args.csv)
    if args.dump_predictions:
        save_predictions(args.dump_predictions, per_image)
    print(f"scenario {report.scenario} {report.class_mode}-level mAP: {report.map:.4f}")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    model, bundle = load_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    matching = [a for a in dataset.images if a.image_id == args.image_id]
    if not matching:
        raise ValueError(f"image id {args.image_id!r} not in {args.data}")
    paths = dump_attention(model, matching[0], args.out)
    print(f"wrote {len(paths['decoder_csv'])} decoder grids to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid_doc = json.loads(Path(args.grid).read_text())
    base = grid_doc.get("base", {})
    axes: dict = grid_doc.get("axes", {})
    if not axes:
        raise ValueError("ablation grid needs an 'axes' object")
    names = sorted(axes)
    rows = []
    for combo in itertools.product(*(axes[n] for n in names)):
        doc = json.loads(json.dumps(base))  # deep copy
        for name, value in zip(names, combo):
            target = doc
            *parents, leaf = name.split(".")
            for part in parents:
                target = target.setdefault(part, {})
            target[leaf] = value
        defaults = TrainConfig().to_dict()
        merged = {**defaults, **doc,
                  "model": {**defaults["model"], **doc.get("model", {})},
                  "weights": {**defaults["weights"], **doc.get("weights", {})}}
        config = TrainConfig.from_dict(merged)
        run_dir = Path(args.out) / "_".join(
            f"{n.split('.')[-1]}={v}" for n, v in zip(names, combo))
        result = train(config, run_dir)
        rows.append({**{n: v for n, v in zip(names, combo)}, "map": result.best_map})
        print(f"{run_dir.name}: mAP {result.best_map:.4f}")
    table_path = Path(args.out) / "ablation.json"
    table_path.write_text(json.dumps(rows, indent=2))
    print(f"wrote ablation table to {table_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoidet", description="Desk-scale human-object interaction detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-stats", help="fit spatial statistics from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["bivariate", "multivariate"],
                   default="bivariate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_stats)

    p = sub.add_parser("embed", help="build an embeddings table for a vocabulary")
    p.add_argument("--provider", choices=["one-hot", "table", "remote"],
                   default="one-hot")
    p.add_argument("--data", required=True, help="dataset supplying the vocabulary")
    p.add_argument("--table", default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--mode", choices=["oa", "action-only"], default="oa")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", type=int, choices=[1, 2], default=2)
    p.add_argument("--class-mode", choices=["action", "pair"], default="action")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--dump-predictions", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-attn", help="write attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("ablate", help="run a config grid and tabulate mAP")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
