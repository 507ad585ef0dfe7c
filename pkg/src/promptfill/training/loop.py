"""Pretraining: one optimization step over the enabled objectives, and the full run."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ConfigError, TrainConfig
from ..data import Batch, DatasetManifest, batch_iterator, load_manifest
from ..embeddings import Vocabulary, pad_batch
from ..model import Unifier
from ..numerics import NonFiniteError, set_precision, take
from ..objectives import LossBundle, apply_mlm_mask, combined_loss, itc_loss, itm_loss, make_itm_batch, mlm_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import AdamW, clip_grad_norm, lr_schedule

log = logging.getLogger(__name__)


def pretrain_losses(model: Unifier, batch: Batch, config: TrainConfig, rng: np.random.Generator) -> LossBundle:
    """Build the loss graph for one batch.

    Encoder outputs depend only on their own side, so each image and caption is
    encoded once and reused by the pair, matching and contrast forwards.
    """
    enabled = set(config.objectives)
    n = len(batch)
    if "itm" in enabled and n < 2:
        raise ValueError("ITM needs a batch of at least two pairs")
    bb = model.backbone
    ids, _ = pad_batch(batch.tokens)
    ev = model.embed_images(batch.images)
    vision_pad = ev.pad_mask
    hv = bb.encode(ev.vectors, None, "vision")
    components = {}

    el = hl = None
    if enabled & {"itm", "itc"}:
        el = model.embed_texts(ids)
        hl = bb.encode(el.vectors, el.pad_mask, "language")

    if "mlm" in enabled:
        entries = [apply_mlm_mask(tok, config.mask_rate, rng, model.vocab_size) for tok in batch.tokens]
        masked_ids, _ = pad_batch([e.masked for e in entries])
        elm = model.embed_texts(masked_ids)
        out = bb.fuse(hv, bb.encode(elm.vectors, elm.pad_mask, "language"), vision_pad, elm.pad_mask)
        rows = np.concatenate([np.full(len(e.positions), i) for i, e in enumerate(entries)])
        positions = np.concatenate([e.positions for e in entries])
        labels = np.concatenate([e.labels for e in entries])
        components["mlm"] = mlm_loss(out.zl, rows, positions, labels, model.mlm_head).loss

    if "itm" in enabled:
        itm = make_itm_batch(n, rng)
        out = bb.fuse(
            take(hv, itm.image_index),
            take(hl, itm.text_index),
            vision_pad[itm.image_index],
            el.pad_mask[itm.text_index],
        )
        components["itm"] = itm_loss(out.zv_cls, out.zl_cls, itm.labels, model.itm_head)

    if "itc" in enabled:
        image_only = model.unify(ev, None)
        lang_prompts = image_only.language_seq
        out_i = bb.fuse(hv, bb.encode(lang_prompts.vectors, None, "language"), vision_pad, lang_prompts.pad_mask)
        text_only = model.unify(None, el)
        vis_prompts = text_only.vision_seq
        out_t = bb.fuse(bb.encode(vis_prompts.vectors, None, "vision"), hl, vis_prompts.pad_mask, el.pad_mask)
        zv = model.itc_head(out_i.zv_cls, "vision")
        zl = model.itc_head(out_t.zl_cls, "language")
        components["itc"] = itc_loss(zv, zl, config.tau)

    bundle = combined_loss(components, config.effective_weights)
    if not np.isfinite(bundle.total.data):
        bad = {k: v for k, v in bundle.values().items() if v is not None and not np.isfinite(v)}
        raise NonFiniteError(f"non-finite loss: {bad}")
    return bundle


def train_step(
    model: Unifier,
    batch: Batch,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: AdamW,
    lrs: dict[str, float],
) -> LossBundle:
    """Losses, backward, global-norm clipping, and one AdamW update with per-group learning rates."""
    model.zero_grad()
    bundle = pretrain_losses(model, batch, config, rng)
    if bundle.total.requires_grad:
        bundle.total.backward()
    clip_grad_norm(model.parameters(), config.grad_clip)
    optimizer.step(lrs)
    return bundle


class BatchStream:
    """Random-access view of the training batch sequence: batch ``i`` depends only on (seed, i)."""

    def __init__(self, manifest: DatasetManifest, images: np.ndarray, vocab: Vocabulary, config: TrainConfig):
        self.manifest, self.images, self.vocab, self.config = manifest, images, vocab, config
        self.per_epoch = len(manifest) // config.batch_size
        if self.per_epoch == 0:
            raise ConfigError(f"train split of {len(manifest)} records is smaller than batch_size {config.batch_size}")
        self._epoch, self._pos, self._iter = -1, 0, None

    def batch(self, index: int) -> Batch:
        epoch, offset = divmod(index, self.per_epoch)
        if epoch != self._epoch or offset < self._pos:
            rng = np.random.default_rng([self.config.seed, 2, epoch])
            self._iter = batch_iterator(self.manifest, self.config.batch_size, rng, "train", self.vocab,
                                        self.config.max_text_len, self.images)
            self._epoch, self._pos = epoch, 0
        while self._pos < offset:
            next(self._iter)
            self._pos += 1
        self._pos += 1
        return next(self._iter)


def lrs_at(step: int, config: TrainConfig) -> dict[str, float]:
    return {
        "backbone": lr_schedule(step, config.total_steps, config.peak_lr_backbone, config.warmup_frac),
        "heads": lr_schedule(step, config.total_steps, config.peak_lr_heads, config.warmup_frac),
    }


# -- state capture -----------------------------------------------------------------

def _counters(model: Unifier) -> dict[str, np.ndarray]:
    bank = model.prompts
    if bank.mode != "pool":
        return {}
    return {
        "prompts.vision_pool": bank.vision_pool.selection_counts,
        "prompts.language_pool": bank.language_pool.selection_counts,
    }


def capture(model: Unifier, optimizer: AdamW | None, rng: np.random.Generator | None, step: int) -> Checkpoint:
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update({f"adam_m/{n}": m for n, m in optimizer.m.items()})
        tensors.update({f"adam_v/{n}": v for n, v in optimizer.v.items()})
    tensors.update({f"counts/{n}": c.astype(np.float64) for n, c in _counters(model).items()})
    return Checkpoint(model.config.to_dict(), tensors, None if rng is None else rng.bit_generator.state, step)


def model_from_checkpoint(ckpt: Checkpoint) -> Unifier:
    config = TrainConfig.from_dict(ckpt.config)
    set_precision(config.precision)
    vocab_size = ckpt.tensors["param/text_embed.token"].shape[0]
    model = Unifier(config, vocab_size)
    model.load_state_dict({k[len("param/"):]: v for k, v in ckpt.tensors.items() if k.startswith("param/")})
    for name, counts in _counters(model).items():
        counts[:] = ckpt.tensors[f"counts/{name}"].astype(np.int64)
    return model


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint) -> None:
    for name in optimizer.m:
        optimizer.m[name] = ckpt.tensors[f"adam_m/{name}"].astype(optimizer.m[name].dtype, copy=True)
        optimizer.v[name] = ckpt.tensors[f"adam_v/{name}"].astype(optimizer.v[name].dtype, copy=True)
    optimizer.step_count = ckpt.step


# -- full run ----------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: Unifier
    checkpoint_path: Path
    metrics_path: Path
    last: dict | None
    initial_pools: dict[str, np.ndarray]


def pretrain(
    config: TrainConfig,
    out_dir,
    resume_from=None,
    checkpoint_every: int | None = None,
    stop_after: int | None = None,
    manifest: DatasetManifest | None = None,
    images: np.ndarray | None = None,
) -> PretrainResult:
    """Run ``total_steps`` steps, log every ``log_every``, write ``checkpoint.bin`` and ``metrics.jsonl``.

    ``resume_from`` continues a saved run bit-for-bit; ``stop_after`` ends early (for midpoint checkpoints).
    """
    config.validate()
    set_precision(config.precision)
    for key in ("train_manifest", "vocab_path"):
        if not getattr(config, key):
            raise ConfigError(f"{key} must be set")
    vocab = Vocabulary.load(config.vocab_path)
    manifest = manifest or load_manifest(config.train_manifest)
    images = manifest.load_images() if images is None else images
    stream = BatchStream(manifest, images, vocab, config)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    rng = np.random.default_rng([config.seed, 1])
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = model_from_checkpoint(ckpt)
        if model.config.to_dict() != config.to_dict():
            raise ConfigError("resume config differs from the checkpoint's config")
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.step
    else:
        model = Unifier(config, len(vocab))
        start = 0
    initial_pools = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith("prompts.")}
    optimizer = AdamW(dict(model.named_parameters()), model.parameter_groups(), config.weight_decay)
    if resume_from is not None:
        restore_optimizer(optimizer, ckpt)

    metrics_path = out / "metrics.jsonl"
    kept = []
    if resume_from is not None and metrics_path.exists():
        kept = [line for line in metrics_path.read_text().splitlines() if json.loads(line)["step"] <= start]
    end = config.total_steps if stop_after is None else min(config.total_steps, stop_after)
    last = None
    try:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            created.append(metrics_path)
            fh.writelines(line + "\n" for line in kept)
            for step in range(start + 1, end + 1):
                lrs = lrs_at(step, config)
                bundle = train_step(model, stream.batch(step - 1), config, rng, optimizer, lrs)
                if step % config.log_every == 0:
                    v = bundle.values()
                    last = {"step": step, "loss_total": v["total"], "loss_mlm": v["mlm"], "loss_itm": v["itm"],
                            "loss_itc": v["itc"], "lr_backbone": lrs["backbone"], "lr_heads": lrs["heads"]}
                    fh.write(json.dumps(last) + "\n")
                    fh.flush()
                    log.info("step %d loss %.4f", step, v["total"])
                if checkpoint_every and step % checkpoint_every == 0 and step < end:
                    path = out / f"step{step:06d}.ckpt"
                    save_checkpoint(capture(model, optimizer, rng, step), path)
                    created.append(path)
        ckpt_path = out / "checkpoint.bin"
        save_checkpoint(capture(model, optimizer, rng, end), ckpt_path)
    except OSError:
        for path in created:
            path.unlink(missing_ok=True)
        raise
    return PretrainResult(model, ckpt_path, metrics_path, last, initial_pools)
