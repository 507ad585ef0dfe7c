"""Prompt pools and static prompts that stand in for a missing modality.

For an image-only input the language side becomes ``[CLS] + k prompts``; for a
text-only input the vision side does. In pool mode the k prompts are the pool
entries scoring highest against a pooled summary (the query) of the present side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSequence, Provenance
from .layers import Module, normal
from .numerics import Tensor, concat, parameter, take

MODES = ("static", "pool")
POOLINGS = ("average", "max")
CASES = ("image_only", "text_only", "pair")


def pool_query(seq: EmbeddingSequence, mode: str = "average") -> np.ndarray:
    """Summarize real (non-special, non-pad) positions into one D-vector per sample.

    Returns shape (B, D). The query only drives selection, so no graph is built.
    """
    if mode not in POOLINGS:
        raise ValueError(f"pooling mode must be one of {POOLINGS}, got {mode!r}")
    real = seq.provenance == Provenance.REAL
    counts = real.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("query pooling needs at least one real position per sample")
    x = seq.vectors.data
    if mode == "average":
        return (x * real[..., None]).sum(axis=1) / counts[:, None]
    return np.where(real[..., None], x, -np.inf).max(axis=1)


@dataclass
class PromptSelection:
    """Top-k selection per sample: ``indices``/``scores`` are (B, k), ``query`` is (B, D)."""

    indices: np.ndarray
    scores: np.ndarray
    query: np.ndarray


class PromptPool(Module):
    def __init__(self, size: int, d: int, modality: str, rng: np.random.Generator, std: float = 0.02):
        if size < 1:
            raise ValueError("pool size must be positive")
        self.modality = modality
        self.entries = parameter(normal(rng, (size, d), std))
        self.selection_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; equal scores keep the lower index first."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def select_prompts(pool: PromptPool, query: np.ndarray, k: int) -> PromptSelection:
    """Pick the k entries with the largest dot product against the query."""
    if not 1 <= k <= pool.size:
        raise ValueError(f"k={k} must lie in [1, {pool.size}]")
    q = np.atleast_2d(np.asarray(query, dtype=pool.entries.data.dtype))
    if not np.isfinite(q).all():
        raise ValueError("query must be finite")
    scores = q @ pool.entries.data.T
    idx = top_k(scores, k)
    np.add.at(pool.selection_counts, idx.reshape(-1), 1)
    return PromptSelection(idx, np.take_along_axis(scores, idx, axis=1), q)


def make_static_prompts(k: int, d: int, rng: np.random.Generator, std: float = 0.02) -> Tensor:
    if k < 1:
        raise ValueError("static prompt count must be at least 1")
    return parameter(normal(rng, (k, d), std))


class PromptBank(Module):
    """Pools and static blocks for both modalities, plus the selection settings."""

    def __init__(self, d: int, pool_size: int, k: int, mode: str, pooling: str, rng: np.random.Generator):
        if mode not in MODES:
            raise ValueError(f"prompt mode must be one of {MODES}")
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if not 1 <= k <= pool_size:
            raise ValueError(f"k={k} must lie in [1, {pool_size}]")
        self.k, self.mode, self.pooling = k, mode, pooling
        if mode == "pool":
            self.vision_pool = PromptPool(pool_size, d, "vision", rng)
            self.language_pool = PromptPool(pool_size, d, "language", rng)
        else:
            self.vision_static = make_static_prompts(k, d, rng)
            self.language_static = make_static_prompts(k, d, rng)

    def pool(self, modality: str) -> PromptPool:
        return self.vision_pool if modality == "vision" else self.language_pool

    def fill(self, present: EmbeddingSequence, cls_slot: Tensor) -> tuple[EmbeddingSequence, PromptSelection | None]:
        """Build the missing side for ``present``: its modality is the opposite one."""
        missing = "language" if present.modality == "vision" else "vision"
        b, d = present.batch, present.vectors.shape[-1]
        selection = None
        if self.mode == "pool":
            pool = self.pool(missing)
            selection = select_prompts(pool, pool_query(present, self.pooling), self.k)
            prompts = take(pool.entries, selection.indices)
        else:
            static = self.vision_static if missing == "vision" else self.language_static
            prompts = Tensor(np.zeros((b, 1, 1), dtype=static.data.dtype)) + static
        cls = Tensor(np.zeros((b, 1, 1), dtype=cls_slot.data.dtype)) + cls_slot.reshape((1, 1, d))
        vectors = concat([cls, prompts], axis=1)
        prov = np.full((b, self.k + 1), Provenance.PROMPT, dtype=np.int8)
        prov[:, 0] = Provenance.CLS
        return EmbeddingSequence(vectors, prov, missing), selection


@dataclass
class UnifiedInput:
    vision_seq: EmbeddingSequence
    language_seq: EmbeddingSequence
    case: str
    selections: dict[str, PromptSelection] = field(default_factory=dict)

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        if self.vision_seq.batch != self.language_seq.batch:
            raise ValueError("vision and language batch sizes differ")


def unify_input(
    vision: EmbeddingSequence | None,
    language: EmbeddingSequence | None,
    prompts: PromptBank,
    cls_slots: dict[str, Tensor],
) -> UnifiedInput:
    """Turn any of the three input cases into a (vision, language) pair.

    ``cls_slots`` maps each modality to the [CLS] embedding placed ahead of its prompts.
    """
    if vision is None and language is None:
        raise ValueError("unify_input needs at least one modality")
    if vision is not None and language is not None:
        return UnifiedInput(vision, language, "pair")
    if vision is not None:
        filled, selection = prompts.fill(vision, cls_slots["language"])
        return UnifiedInput(vision, filled, "image_only", {"language": selection} if selection else {})
    filled, selection = prompts.fill(language, cls_slots["vision"])
    return UnifiedInput(filled, language, "text_only", {"vision": selection} if selection else {})
