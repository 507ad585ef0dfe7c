"""Command-line entry point: ``promptfill <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, load_config
from .data import build_dataset, load_manifest, read_image
from .embeddings import Vocabulary, tokenize
from .evaluation import (
    TABLE2_GRID,
    FinetuneConfig,
    eval_texts,
    finetune_classifier,
    itm_accuracy,
    mlm_eval_loss,
    run_ablation,
    zero_shot_retrieve,
)
from .numerics import no_grad, set_precision
from .training import load_checkpoint, model_from_checkpoint, pretrain
from .verification import run_suite

log = logging.getLogger("promptfill")


class UsageError(Exception):
    """Bad flag values detected after argparse has run."""


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _resolved(args) -> TrainConfig:
    config = load_config(args.config, args.set)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config.validate()


def _echo(config: TrainConfig) -> None:
    print(json.dumps({"resolved_config": config.to_dict()}, sort_keys=True))


def _model_and_config(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    config = model.config
    overrides = {k: getattr(args, k) for k in ("train_manifest", "eval_manifest", "vocab_path")
                 if getattr(args, k, None)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return model, replace(config, **overrides)


def _require(config: TrainConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(config, key):
            raise UsageError(f"{key} is not set (pass --{key.replace('_', '-')} or set it in the config)")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    counts = [args.train, args.val, args.test]
    n = sum(counts)
    if n < 1:
        raise UsageError("split sizes must add up to at least one record")
    seed = 0 if args.seed is None else args.seed
    paths = build_dataset(n, args.rho, seed, args.out, [c / n for c in counts], vocab_size=args.vocab_size)
    info = {"n": n, "rho": args.rho, "seed": seed, "splits": dict(zip(("train", "val", "test"), counts)),
            "paths": {k: str(v) for k, v in paths.items()}}
    (Path(args.out) / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    config = _resolved(args)
    _echo(config)
    result = pretrain(config, args.out, resume_from=args.resume, checkpoint_every=args.checkpoint_every,
                      stop_after=args.stop_after)
    print(json.dumps({"checkpoint": str(result.checkpoint_path), "last": result.last}, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    model, config = _model_and_config(args)
    _require(config, "train_manifest", "eval_manifest", "vocab_path")
    _echo(config)
    ft = FinetuneConfig(steps=args.steps, batch_size=args.batch_size, lr_head=args.lr_head,
                        lr_backbone=args.lr_backbone, fraction=args.fraction, seed=config.seed)
    vocab = Vocabulary.load(config.vocab_path)
    result = finetune_classifier(model, load_manifest(config.train_manifest), load_manifest(config.eval_manifest),
                                 args.task, vocab, ft)
    row = {"task": args.task, "accuracy": result.accuracy, "train_size": result.train_size, "finetune": asdict(ft)}
    _write_jsonl(Path(args.out) / "finetune.jsonl", [{"config": config.to_dict(), "seed": config.seed}, row])
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_eval_retrieval(args) -> int:
    model, config = _model_and_config(args)
    _require(config, "eval_manifest", "vocab_path")
    _echo(config)
    manifest = load_manifest(config.eval_manifest)
    vocab = Vocabulary.load(config.vocab_path)
    images = manifest.load_images()
    _, tokens = eval_texts(manifest, vocab, config.max_text_len, config.seed)
    reports = zero_shot_retrieve(model, images, tokens, ks=args.ks)
    rows = [{"config": config.to_dict(), "seed": config.seed}] + [r.to_dict() for r in reports.values()]
    pretext = {"itm_accuracy": itm_accuracy(model, images, tokens, config.seed),
               "mlm_loss": mlm_eval_loss(model, images, tokens, config.mask_rate, config.seed),
               "ln_vocab": float(np.log(model.vocab_size))}
    rows.append({"held_out": pretext, "N": len(manifest)})
    _write_jsonl(Path(args.out) / "retrieval.jsonl", rows)
    for row in rows[1:]:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _resolved(args)
    _require(config, "train_manifest", "eval_manifest", "vocab_path")
    _echo(config)
    grid = TABLE2_GRID if not args.grid else [g for g in TABLE2_GRID if g["name"] in args.grid]
    if len(grid) < 2:
        raise UsageError("--grid must name at least two known configurations")
    ft = FinetuneConfig(steps=args.finetune_steps, lr_head=args.lr_head, lr_backbone=args.lr_backbone)
    vqa = {k: load_manifest(getattr(args, k)) if getattr(args, k) else None for k in ("vqa_train", "vqa_test")}
    report = run_ablation(config, grid, args.seeds, args.fractions, load_manifest(config.eval_manifest), args.out, ft,
                          reuse=args.reuse, **vqa)
    print(report.table(), end="")
    return 0


def cmd_inspect_prompts(args) -> int:
    model, config = _model_and_config(args)
    source = Path(args.input)
    sample_id = source.stem if source.is_file() else "text"
    if source.is_file():
        with no_grad():
            x, _ = model.encode(images=read_image(source)[None])
        present = "vision"
    else:
        _require(config, "vocab_path")
        tokens = [tokenize(args.input, Vocabulary.load(config.vocab_path), config.max_text_len)]
        with no_grad():
            x, _ = model.encode(tokens=tokens)
        present = "language"
    rows = [{"config": config.to_dict(), "seed": config.seed}]
    for side, sel in x.selections.items():
        rows.append({"sample_id": sample_id, "side": side, "query_from": present, "indices": sel.indices[0].tolist(),
                     "scores": [float(s) for s in sel.scores[0]]})
    if not x.selections:
        rows.append({"sample_id": sample_id, "side": "vision" if present == "language" else "language", "query_from": present,
                     "indices": None, "note": f"prompt_mode={config.prompt_mode} uses a static block"})
    if args.out:
        _write_jsonl(Path(args.out) / "prompts.jsonl", rows)
    for row in rows[1:]:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    result = run_suite(points=args.points, tolerance=args.tolerance, seed=0 if args.seed is None else args.seed)
    for report in result.reports:
        print(report)
    failed = sum(not r.passed for r in result.reports)
    print(f"{len(result.reports) - failed}/{len(result.reports)} checks passed in {result.seconds:.2f}s")
    return 0 if result.passed else 1


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    FT = FinetuneConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--workers", type=int, default=1, help="side-worker cap (runs are single-threaded)")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True)
    ckpt.add_argument("--train-manifest", dest="train_manifest")
    ckpt.add_argument("--eval-manifest", dest="eval_manifest")
    ckpt.add_argument("--vocab-path", dest="vocab_path")

    parser = argparse.ArgumentParser(prog="promptfill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic shapes corpus")
    p.add_argument("--train", type=int, default=4096)
    p.add_argument("--val", type=int, default=256)
    p.add_argument("--test", type=int, default=256)
    p.add_argument("--rho", type=float, default=1.0, help="probability a caption describes its own image")
    p.add_argument("--vocab-size", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain with the enabled objectives")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--stop-after", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, ckpt], help="train a classification head")
    p.add_argument("--task", choices=("image_only", "text_only", "multimodal"), required=True)
    p.add_argument("--steps", type=int, default=FT.steps)
    p.add_argument("--batch-size", type=int, default=FT.batch_size)
    p.add_argument("--lr-head", type=float, default=FT.lr_head)
    p.add_argument("--lr-backbone", type=float, default=FT.lr_backbone, help="0 keeps the backbone frozen")
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of the training split used")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-retrieval", parents=[common, ckpt], help="zero-shot Recall@K plus held-out ITM/MLM")
    p.add_argument("--ks", type=_csv(int), default=[1, 5, 10])
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("ablate", parents=[common], help="objective ablation over seeds and data fractions")
    p.add_argument("--seeds", type=_csv(int), default=[0, 1, 2])
    p.add_argument("--fractions", type=_csv(float), default=[0.1, 1.0])
    p.add_argument("--grid", type=_csv(str), help="subset of: " + ",".join(g["name"] for g in TABLE2_GRID))
    p.add_argument("--finetune-steps", type=int, default=FT.steps)
    p.add_argument("--lr-head", type=float, default=FT.lr_head)
    p.add_argument("--lr-backbone", type=float, default=FT.lr_backbone)
    p.add_argument("--vqa-train", help="manifest for VQA-style fine-tuning (default: the pretraining split)")
    p.add_argument("--vqa-test", help="manifest for VQA-style accuracy (default: the eval split)")
    p.add_argument("--reuse", action="store_true", help="load finished runs with a matching config instead of retraining")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-prompts", parents=[common, ckpt], help="show prompt selections for one input")
    p.add_argument("--input", required=True, help="an image file written by gen-data, or caption text")
    p.set_defaults(func=cmd_inspect_prompts, out=None)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        set_precision("float32")


def main() -> None:
    sys.exit(run_command())
