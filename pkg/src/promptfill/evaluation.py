"""Downstream evaluation: Recall@K retrieval, held-out pretext metrics, classifier fine-tuning, ablations."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .data import COLORS, QUESTION, SHAPES, DatasetManifest, batch_iterator, load_manifest, sample_sentence
from .embeddings import Provenance, TokenSequence, Vocabulary, pad_batch, tokenize
from .layers import MLP, Module
from .model import Unifier, itc_embed
from .numerics import Tensor, concat, cross_entropy, no_grad
from .objectives import apply_mlm_mask, make_itm_batch
from .training.optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)

TASK_LABELS = {"image_only": "shape", "text_only": "color", "multimodal": "shape"}
LABEL_VALUES = {"shape": list(SHAPES), "color": list(COLORS)}


# -- retrieval ---------------------------------------------------------------------

def recall_at_k(scores: np.ndarray, k: int) -> float:
    """Fraction of rows whose diagonal entry ranks in the top k; ties go to the lower column index."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != n:
        raise ValueError(f"recall_at_k expects a square score matrix, got {scores.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must lie in [1, {n}]")
    true = np.diag(scores)[:, None]
    cols = np.arange(n)
    ahead = (scores > true) | ((scores == true) & (cols[None, :] < cols[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]
    n: int
    mode: str = "zero_shot"

    def to_dict(self) -> dict:
        return {"direction": self.direction, "recall_at": {str(k): v for k, v in self.recall_at.items()},
                "N": self.n, "mode": self.mode}


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def embed_corpus(model: Unifier, images: np.ndarray | None = None, tokens: Sequence[TokenSequence] | None = None,
                 batch_size: int = 64) -> np.ndarray:
    """ITC embeddings for a corpus, computed in fixed-order chunks without building a graph."""
    rows = []
    with no_grad():
        if images is not None:
            for sl in _chunks(len(images), batch_size):
                rows.append(itc_embed(model, images=images[sl]).data)
        else:
            for sl in _chunks(len(tokens), batch_size):
                rows.append(itc_embed(model, tokens=list(tokens[sl])).data)
    return np.concatenate(rows).astype(np.float64)


def retrieval_scores(model: Unifier, images: np.ndarray, tokens: Sequence[TokenSequence]) -> np.ndarray:
    if len(images) != len(tokens):
        raise ValueError(f"{len(images)} images but {len(tokens)} texts")
    return embed_corpus(model, images=images) @ embed_corpus(model, tokens=tokens).T


def zero_shot_retrieve(model: Unifier, images: np.ndarray, tokens: Sequence[TokenSequence],
                       ks: Sequence[int] = (1, 5, 10), mode: str = "zero_shot") -> dict[str, RetrievalReport]:
    """Score every image against every text; ground truth is the diagonal."""
    scores = retrieval_scores(model, images, tokens)
    n = len(images)
    return {
        "i2t": RetrievalReport("i2t", {k: recall_at_k(scores, k) for k in ks}, n, mode),
        "t2i": RetrievalReport("t2i", {k: recall_at_k(scores.T, k) for k in ks}, n, mode),
    }


def eval_texts(manifest: DatasetManifest, vocab: Vocabulary, max_len: int, seed: int = 0,
               suffix: str = "") -> tuple[list[str], list[TokenSequence]]:
    """One sampled sentence per record, seeded, in manifest order."""
    rng = np.random.default_rng([seed, 3])
    texts = [sample_sentence(r["text"], rng) + suffix for r in manifest.records]
    return texts, [tokenize(t, vocab, max_len) for t in texts]


# -- held-out pretext metrics ---------------------------------------------------------

def itm_accuracy(model: Unifier, images: np.ndarray, tokens: Sequence[TokenSequence], seed: int = 0,
                 batch_size: int = 32) -> float:
    rng = np.random.default_rng([seed, 4])
    correct = total = 0
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            n = sl.stop - sl.start
            if n < 2:
                continue
            batch = make_itm_batch(n, rng)
            toks = list(tokens[sl])
            _, out = model.encode(images=images[sl][batch.image_index], tokens=[toks[i] for i in batch.text_index])
            logits = model.itm_head(out.zv_cls, out.zl_cls).data
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
            total += len(batch.labels)
    return correct / total


def mlm_eval_loss(model: Unifier, images: np.ndarray, tokens: Sequence[TokenSequence], rate: float = 0.15,
                  seed: int = 0, batch_size: int = 64) -> float:
    """Mean cross-entropy over all masked targets of a held-out split (pair forwards)."""
    rng = np.random.default_rng([seed, 5])
    nll, count = 0.0, 0
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            entries = [apply_mlm_mask(t, rate, rng, model.vocab_size) for t in tokens[sl]]
            if not any(len(e.positions) for e in entries):
                continue
            _, out = model.encode(images=images[sl], tokens=[e.masked for e in entries])
            rows = np.concatenate([np.full(len(e.positions), i) for i, e in enumerate(entries)])
            positions = np.concatenate([e.positions for e in entries])
            labels = np.concatenate([e.labels for e in entries])
            logits = model.mlm_head(out.zl[rows, positions]).data.astype(np.float64)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            nll -= float(logp[np.arange(len(labels)), labels].sum())
            count += len(labels)
    return nll / count


# -- classification fine-tuning ---------------------------------------------------------

class ClassifierHead(Module):
    """Two-layer perceptron over concatenated vision and language CLS vectors: 2D -> D -> classes."""

    def __init__(self, d: int, classes: int, task: str, rng: np.random.Generator):
        if task not in TASK_LABELS:
            raise ValueError(f"task must be one of {tuple(TASK_LABELS)}")
        self.task = task
        self.input_dim = 2 * d
        self.mlp = MLP(2 * d, d, classes, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.mlp(features)


@dataclass
class FinetuneConfig:
    steps: int = 500
    batch_size: int = 32
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 0.01
    fraction: float = 1.0
    seed: int = 0


def task_inputs(manifest: DatasetManifest, task: str, vocab: Vocabulary, max_len: int, seed: int):
    """Images/tokens per task mode (None for the side that will be prompt-filled) and integer labels."""
    key = TASK_LABELS[task]
    missing = [r["id"] for r in manifest.records if key not in r.get("labels", {})]
    if missing:
        raise ValueError(f"records lack the {key!r} label needed for {task}: {missing[:3]}")
    labels = np.array([LABEL_VALUES[key].index(r["labels"][key]) for r in manifest.records])
    images = manifest.load_images() if task != "text_only" else None
    tokens = None
    if task != "image_only":
        suffix = " " + QUESTION if task == "multimodal" else ""
        _, tokens = eval_texts(manifest, vocab, max_len, seed, suffix)
    return images, tokens, labels


def _cls_features(model: Unifier, images, tokens) -> Tensor:
    x, out = model.encode(images=images, tokens=tokens)
    return concat([out.zv_cls, out.zl_cls], axis=-1)


def _features(model: Unifier, images, tokens, n: int, batch_size: int = 64) -> np.ndarray:
    rows = []
    with no_grad():
        for sl in _chunks(n, batch_size):
            rows.append(_cls_features(model, None if images is None else images[sl],
                                      None if tokens is None else list(tokens[sl])).data)
    return np.concatenate(rows)


@dataclass
class FinetuneResult:
    head: ClassifierHead
    accuracy: float
    task: str
    train_size: int
    model: Unifier


def finetune_classifier(model: Unifier, train: DatasetManifest, test: DatasetManifest, task: str,
                        vocab: Vocabulary, config: FinetuneConfig | None = None) -> FinetuneResult:
    """Train a fresh two-layer head on CLS pairs (absent side prompt-filled) and report held-out accuracy.

    ``lr_backbone == 0`` freezes the backbone and trains on cached features. Otherwise a
    copy of ``model`` is tuned, so the caller's model is left untouched either way.
    """
    config = config or FinetuneConfig()
    if task not in TASK_LABELS:
        raise ValueError(f"task must be one of {tuple(TASK_LABELS)}")
    train = train.subset(config.fraction)
    max_len = model.config.max_text_len
    tr_images, tr_tokens, tr_labels = task_inputs(train, task, vocab, max_len, config.seed)
    te_images, te_tokens, te_labels = task_inputs(test, task, vocab, max_len, config.seed + 1)
    rng = np.random.default_rng([config.seed, 6])
    classes = len(LABEL_VALUES[TASK_LABELS[task]])
    head = ClassifierHead(model.config.d, classes, task, rng)
    frozen = config.lr_backbone == 0
    if not frozen:
        model = copy.deepcopy(model)
    named = {f"head.{n}": p for n, p in head.named_parameters()}
    groups = {"heads": list(named)}
    if not frozen:
        backbone_named = dict(model.named_parameters())
        named.update(backbone_named)
        groups["backbone"] = list(backbone_named)
    optimizer = AdamW(named, groups, config.weight_decay)
    lrs = {"heads": config.lr_head, "backbone": config.lr_backbone}
    n = len(tr_labels)
    cached = _features(model, tr_images, tr_tokens, n) if frozen else None
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        idx = rng.choice(n, size=bs, replace=False)
        for p in named.values():
            p.grad = None
        if frozen:
            feats = Tensor(cached[idx])
        else:
            feats = _cls_features(model, None if tr_images is None else tr_images[idx],
                                  None if tr_tokens is None else [tr_tokens[i] for i in idx])
        loss = cross_entropy(head(feats), tr_labels[idx])
        loss.backward()
        clip_grad_norm(list(named.values()), 1.0)
        optimizer.step(lrs)
    feats = _features(model, te_images, te_tokens, len(te_labels))
    with no_grad():
        pred = np.argmax(head(Tensor(feats)).data, axis=1)
    return FinetuneResult(head, float(np.mean(pred == te_labels)), task, n, model)


# -- ablation ------------------------------------------------------------------------------

TABLE2_GRID = [
    {"name": "mlm", "objectives": ["mlm"]},
    {"name": "itm", "objectives": ["itm"]},
    {"name": "mlm+itm", "objectives": ["mlm", "itm"]},
    {"name": "itc", "objectives": ["itc"]},
    {"name": "mlm+itm+itc", "objectives": ["mlm", "itm", "itc"]},
]


@dataclass
class AblationReport:
    rows: list[dict]
    verdicts: dict[str, dict]
    fractions: list[float]
    seeds: list[int]
    base_config: dict = field(default_factory=dict)
    seconds: float = 0.0  # pretrain + evaluation wall time, including runs loaded with ``reuse``

    def table(self) -> str:
        headers = ["config", "seed", "R@1 i2t", "R@1 t2i"] + [f"VQA {int(f * 100)}%" for f in self.fractions]
        lines = [headers]
        for r in self.rows:
            lines.append([r["config"], str(r["seed"]), f"{r['r1_i2t']:.3f}", f"{r['r1_t2i']:.3f}"]
                         + [f"{r['vqa'][str(f)]:.3f}" for f in self.fractions])
        widths = [max(len(row[i]) for row in lines) for i in range(len(headers))]
        text = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
        text.append("")
        for name, v in self.verdicts.items():
            text.append(f"{name}: {'HOLDS' if v['holds'] else 'FAILS'} ({v['detail']})")
        return "\n".join(text) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config": self.base_config, "seeds": self.seeds, "fractions": self.fractions}) + "\n")
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            fh.write(json.dumps({"verdicts": self.verdicts}, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(self.table(), encoding="utf-8")


def _majority_verdict(rows: list[dict], better: Sequence[str], worse: Sequence[str], metric, seeds) -> dict:
    by = {(r["config"], r["seed"]): r for r in rows}
    pairs = {}
    for b, w in itertools.product(better, worse):
        wins = sum(metric(by[(b, s)]) > metric(by[(w, s)]) for s in seeds)
        pairs[f"{b}>{w}"] = {"wins": wins, "of": len(seeds), "majority": wins * 2 > len(seeds)}
    holds = bool(pairs) and all(p["majority"] for p in pairs.values())
    detail = ", ".join(f"{k} {v['wins']}/{v['of']}" for k, v in pairs.items()) or "no comparable configs"
    return {"holds": holds, "pairs": pairs, "detail": detail}


def ordering_verdicts(rows: list[dict], grid: list[dict], seeds: Sequence[int], fractions: Sequence[float]) -> dict:
    with_itc = [g["name"] for g in grid if "itc" in g["objectives"]]
    without_itc = [g["name"] for g in grid if "itc" not in g["objectives"]]
    fusion = [g["name"] for g in grid if {"mlm", "itm"} <= set(g["objectives"])]
    itc_only = [g["name"] for g in grid if set(g["objectives"]) == {"itc"}]
    verdicts = {
        "itc_beats_no_itc_on_R@1": _majority_verdict(
            rows, with_itc, without_itc, lambda r: (r["r1_i2t"] + r["r1_t2i"]) / 2, seeds)
    }
    for f in fractions:
        verdicts[f"mlm+itm_beats_itc_only_on_vqa@{f:g}"] = _majority_verdict(
            rows, fusion, itc_only, lambda r, f=f: r["vqa"][str(f)], seeds)
    return verdicts


def run_ablation(
    base: TrainConfig,
    grid: list[dict],
    seeds: Sequence[int],
    fractions: Sequence[float],
    test_manifest: DatasetManifest,
    out_dir,
    finetune: FinetuneConfig | None = None,
    vqa_train: DatasetManifest | None = None,
    vqa_test: DatasetManifest | None = None,
    reuse: bool = False,
) -> AblationReport:
    """Pretrain every (config, seed) identically except for objective toggles, then evaluate.

    Data fractions apply to the fine-tuning split of the VQA-style task. With ``reuse``,
    a run directory whose final checkpoint has the same config is loaded instead of retrained;
    the wall time recorded in its ``wall.json`` then counts toward ``AblationReport.seconds``.
    """
    from .training.checkpoint import load_checkpoint
    from .training.loop import model_from_checkpoint, pretrain

    if len(grid) < 2:
        raise ValueError("an ablation needs at least two configurations")
    finetune = finetune or FinetuneConfig()
    vocab = Vocabulary.load(base.vocab_path)
    train_manifest = load_manifest(base.train_manifest)
    train_images = train_manifest.load_images()
    vqa_train = vqa_train or train_manifest
    vqa_test = vqa_test or test_manifest
    test_images = test_manifest.load_images()
    _, test_tokens = eval_texts(test_manifest, vocab, base.max_text_len)
    rows = []
    out = Path(out_dir)
    total_seconds = 0.0
    for spec in grid:
        for seed in seeds:
            config = replace(base, seed=seed, objectives=list(spec["objectives"]))
            run_dir = out / f"{spec['name']}_seed{seed}"
            ckpt_path = run_dir / "checkpoint.bin"
            wall_path = run_dir / "wall.json"
            model = None
            if reuse and ckpt_path.exists() and wall_path.exists():
                ckpt = load_checkpoint(ckpt_path)
                if ckpt.config == config.to_dict() and ckpt.step == config.total_steps:
                    model = model_from_checkpoint(ckpt)
                    total_seconds += json.loads(wall_path.read_text())["pretrain_seconds"]
            if model is None:
                start = time.perf_counter()
                model = pretrain(config, run_dir, manifest=train_manifest, images=train_images).model
                seconds = time.perf_counter() - start
                wall_path.write_text(json.dumps({"pretrain_seconds": seconds}) + "\n")
                total_seconds += seconds
            start = time.perf_counter()
            reports = zero_shot_retrieve(model, test_images, test_tokens, ks=(1,))
            vqa = {}
            for f in fractions:
                ft = replace(finetune, fraction=f, seed=seed)
                vqa[str(f)] = finetune_classifier(model, vqa_train, vqa_test, "multimodal", vocab, ft).accuracy
            row = {"config": spec["name"], "objectives": list(spec["objectives"]), "seed": seed,
                   "r1_i2t": reports["i2t"].recall_at[1], "r1_t2i": reports["t2i"].recall_at[1], "vqa": vqa}
            total_seconds += time.perf_counter() - start
            log.info("ablation row %s", row)
            rows.append(row)
    report = AblationReport(rows, ordering_verdicts(rows, grid, seeds, fractions), list(fractions), list(seeds),
                            base.to_dict(), total_seconds)
    report.write(out)
    return report
