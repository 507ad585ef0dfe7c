"""Masked language modeling, image-text matching, image-text contrast, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import MASK_ID, SPECIALS, TokenSequence
from .layers import LayerNorm, Linear, MLP, Module
from .numerics import Tensor, concat, cross_entropy, gelu, l2_normalize, matmul, take

OBJECTIVES = ("mlm", "itm", "itc")


# -- masked language modeling --------------------------------------------------

@dataclass
class MlmEntry:
    """One masked caption: ``positions``/``labels`` are the targets (position, true id)."""

    masked: TokenSequence
    positions: np.ndarray
    labels: np.ndarray
    original: TokenSequence


def apply_mlm_mask(tokens: TokenSequence, rate: float, rng: np.random.Generator, vocab_size: int) -> MlmEntry:
    """Select each maskable position with probability ``rate``; 80% [MASK], 10% random id, 10% kept.

    Draw order per call: one uniform per position for selection, then per selected
    position one uniform for the replacement kind and one integer for the random id.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate {rate} outside [0, 1]")
    ids = tokens.ids.copy()
    chosen = (rng.random(len(ids)) < rate) & tokens.maskable
    positions = np.flatnonzero(chosen)
    labels = tokens.ids[positions].copy()
    if len(positions):
        kind = rng.random(len(positions))
        random_ids = rng.integers(len(SPECIALS), vocab_size, size=len(positions))
        ids[positions] = np.where(kind < 0.8, MASK_ID, np.where(kind < 0.9, random_ids, labels))
    return MlmEntry(TokenSequence(ids, tokens.maskable.copy()), positions, labels, tokens)


class MlmHead(Module):
    """Two-layer head over language positions: D -> D (GELU, LayerNorm) -> V."""

    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator):
        self.transform = Linear(d, d, rng)
        self.norm = LayerNorm(d)
        self.decoder = Linear(d, vocab_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decoder(self.norm(gelu(self.transform(x))))


@dataclass
class MlmResult:
    loss: Tensor
    empty: bool
    logits: Tensor | None = None


def mlm_loss(zl: Tensor, rows: np.ndarray, positions: np.ndarray, labels: np.ndarray, head: MlmHead) -> MlmResult:
    """Mean cross-entropy at the target positions of ``zl`` (B, L, D).

    ``rows``/``positions`` index the targets; an empty target set returns a zero loss flagged empty.
    """
    rows, positions, labels = (np.asarray(a, dtype=np.int64) for a in (rows, positions, labels))
    if len(positions) == 0:
        return MlmResult(Tensor(0.0), True)
    b, length = zl.shape[:2]
    if positions.min() < 0 or positions.max() >= length or rows.min() < 0 or rows.max() >= b:
        raise IndexError(f"MLM target outside representation of shape {zl.shape[:2]}")
    picked = take(zl.reshape((b * length, zl.shape[-1])), rows * length + positions)
    logits = head(picked)
    return MlmResult(cross_entropy(logits, labels), False, logits)


# -- image-text matching -------------------------------------------------------

@dataclass
class ItmBatch:
    image_index: np.ndarray
    text_index: np.ndarray
    labels: np.ndarray


def make_itm_batch(n: int, rng: np.random.Generator) -> ItmBatch:
    """N positives plus, for each image, one negative text drawn uniformly from the others; shuffled."""
    if n < 2:
        raise ValueError("ITM needs at least two pairs to draw a negative")
    offsets = rng.integers(1, n, size=n)
    negatives = (np.arange(n) + offsets) % n
    images = np.concatenate([np.arange(n), np.arange(n)])
    texts = np.concatenate([np.arange(n), negatives])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    order = rng.permutation(2 * n)
    return ItmBatch(images[order], texts[order], labels[order])


class ItmHead(Module):
    """Two-layer head over concatenated CLS pairs: 2D -> D -> 2."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = MLP(2 * d, d, 2, rng)

    def __call__(self, zv_cls: Tensor, zl_cls: Tensor) -> Tensor:
        return self.mlp(concat([zv_cls, zl_cls], axis=-1))


def itm_loss(zv_cls: Tensor, zl_cls: Tensor, labels, head: ItmHead) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if not (zv_cls.shape[0] == zl_cls.shape[0] == len(labels)):
        raise ValueError(f"ITM count mismatch: {zv_cls.shape[0]}, {zl_cls.shape[0]}, {len(labels)} labels")
    return cross_entropy(head(zv_cls, zl_cls), labels)


# -- image-text contrast -------------------------------------------------------

class ItcHead(Module):
    """Per-modality linear projections of the own-side CLS, followed by L2 normalization."""

    def __init__(self, d: int, d_out: int, rng: np.random.Generator):
        self.vision = Linear(d, d_out, rng)
        self.language = Linear(d, d_out, rng)

    def __call__(self, cls: Tensor, modality: str) -> Tensor:
        proj = self.vision if modality == "vision" else self.language
        return l2_normalize(proj(cls), axis=-1)


def itc_loss(zv: Tensor, zl: Tensor, tau: float) -> Tensor:
    """Symmetric in-batch contrastive loss on unit-norm rows, averaged over pairs."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if zv.shape != zl.shape or zv.ndim != 2 or zv.shape[0] < 1:
        raise ValueError(f"ITC expects two (N, D) blocks of equal shape, got {zv.shape} and {zl.shape}")
    for name, z in (("zv", zv), ("zl", zl)):
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError(f"{name} rows must be unit norm")
    s = matmul(zv, zl.T) * (1.0 / tau)
    targets = np.arange(zv.shape[0])
    return (cross_entropy(s, targets) + cross_entropy(s.T, targets)) * 0.5


def itc_similarity(zv: np.ndarray, zl: np.ndarray, tau: float) -> dict[str, np.ndarray]:
    """Similarity matrix with its image-to-text (row) and text-to-image (column) softmaxes."""
    s = np.asarray(zv) @ np.asarray(zl).T / tau
    e_rows = np.exp(s - s.max(axis=1, keepdims=True))
    e_cols = np.exp(s - s.max(axis=0, keepdims=True))
    return {
        "S": s,
        "p_i2t": e_rows / e_rows.sum(axis=1, keepdims=True),
        "p_t2i": e_cols / e_cols.sum(axis=0, keepdims=True),
        "targets": np.eye(len(s)),
    }


# -- combination ---------------------------------------------------------------

@dataclass
class LossBundle:
    mlm: Tensor | None = None
    itm: Tensor | None = None
    itc: Tensor | None = None
    weights: dict[str, float] = field(default_factory=lambda: dict.fromkeys(OBJECTIVES, 1.0))
    total: Tensor | None = None

    def values(self) -> dict[str, float | None]:
        out = {name: (None if getattr(self, name) is None else float(getattr(self, name).data)) for name in OBJECTIVES}
        out["total"] = None if self.total is None else float(self.total.data)
        return out


def combined_loss(components: dict[str, Tensor | float | None], weights: dict[str, float] | None = None) -> LossBundle:
    """total = sum of weight * loss over present components; a positive weight on a missing one is an error."""
    weights = {**dict.fromkeys(OBJECTIVES, 1.0), **(weights or {})}
    unknown = set(components) - set(OBJECTIVES)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    present = {k: (v if v is None or isinstance(v, Tensor) else Tensor(v)) for k, v in components.items()}
    for name in OBJECTIVES:
        if weights[name] > 0 and present.get(name) is None:
            raise ValueError(f"objective {name!r} has weight {weights[name]} but no loss")
    total = Tensor(0.0)
    for name in OBJECTIVES:
        loss = present.get(name)
        if loss is not None and weights[name] != 0:
            total = total + loss * weights[name]
    return LossBundle(present.get("mlm"), present.get("itm"), present.get("itc"), weights, total)
