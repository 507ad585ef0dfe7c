"""Vocabulary, whitespace tokenizer, patchifier, and the two input embedders.

Sequences are carried batched: an ``EmbeddingSequence`` holds a (B, L, D) tensor
plus a (B, L) provenance code per position.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import Linear, Module, normal
from .numerics import Tensor, add, concat, parameter, take

SPECIALS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)
MIN_TOKENS = 3


class Provenance(enum.IntEnum):
    CLS = 0
    REAL = 1
    SEP = 2
    PROMPT = 3
    PAD = 4


class TextTooShortError(ValueError):
    """Captions with fewer than three tokens are rejected."""


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIALS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: str | Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked whitespace vocabulary; ties broken lexicographically."""
    if max_size < len(SPECIALS):
        raise ValueError(f"max_size must leave room for {len(SPECIALS)} special tokens")
    texts = [corpus] if isinstance(corpus, str) else corpus
    counts = Counter(tok for text in texts for tok in text.split())
    for special in SPECIALS:
        counts.pop(special, None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [tok for tok, _ in ranked[: max_size - len(SPECIALS)]])


@dataclass
class TokenSequence:
    ids: np.ndarray
    maskable: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.maskable = np.asarray(self.maskable, dtype=bool)
        if self.ids[0] != CLS_ID or self.ids[-1] != SEP_ID:
            raise ValueError("token sequence must start with [CLS] and end with [SEP]")
        if self.maskable[self.ids == CLS_ID].any() or self.maskable[self.ids == SEP_ID].any() or self.maskable[self.ids == PAD_ID].any():
            raise ValueError("special positions cannot be maskable")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    words = text.split()
    if len(words) < MIN_TOKENS:
        raise TextTooShortError(f"text has {len(words)} tokens; at least {MIN_TOKENS} required: {text!r}")
    if len(words) > max_len:
        words = words[: max_len - 1]
    ids = [CLS_ID] + [vocab.id(w) for w in words] + [SEP_ID]
    maskable = [False] + [True] * len(words) + [False]
    return TokenSequence(np.array(ids), np.array(maskable))


def detokenize(tokens: TokenSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in tokens.ids if i >= len(SPECIALS)]


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack token sequences right-padded with [PAD]; returns (ids, maskable)."""
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    maskable = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        maskable[i, : len(s)] = s.maskable
    return ids, maskable


@dataclass
class PatchGrid:
    """Flattened patches; ``patches`` is (N_v, P*P*C), or (B, N_v, P*P*C) for a batch."""

    patches: np.ndarray
    grid: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split H x W x C (or B x H x W x C) images into row-major, channel-last patches."""
    image = np.asarray(image)
    batched = image.ndim == 4
    imgs = image if batched else image[None]
    _, h, w, c = imgs.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} must divide image dims H={h}, W={w}")
    gh, gw = h // p, w // p
    patches = imgs.reshape(len(imgs), gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(len(imgs), gh * gw, p * p * c)
    return PatchGrid(patches if batched else patches[0], (gh, gw))


@dataclass
class EmbeddingSequence:
    vectors: Tensor
    provenance: np.ndarray
    modality: str

    def __post_init__(self):
        if self.vectors.ndim == 2:
            self.vectors = self.vectors.reshape((1, *self.vectors.shape))
        self.provenance = np.asarray(self.provenance, dtype=np.int8).reshape(self.vectors.shape[:2])
        if self.modality not in ("vision", "language"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if np.any(self.provenance[:, 0] != Provenance.CLS) or np.any((self.provenance == Provenance.CLS).sum(axis=1) != 1):
            raise ValueError("each sequence needs exactly one [CLS], at position 0")

    @property
    def batch(self) -> int:
        return self.vectors.shape[0]

    @property
    def length(self) -> int:
        return self.vectors.shape[1]

    @property
    def pad_mask(self) -> np.ndarray:
        return self.provenance == Provenance.PAD


def _check_distinct_rows(table: np.ndarray, what: str) -> None:
    if len(np.unique(table, axis=0)) != len(table):
        raise ValueError(f"{what} has duplicate rows")


class TextEmbedding(Module):
    def __init__(self, vocab_size: int, max_len: int, d: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.max_positions = max_len + 2
        self.token = parameter(normal(rng, (vocab_size, d)))
        self.position = parameter(normal(rng, (self.max_positions, d)))
        _check_distinct_rows(self.position.data, "text position table")

    def cls_slot(self) -> Tensor:
        """Embedding of a [CLS] at position 0, shared with prompt-filled language sides."""
        return add(take(self.token, [CLS_ID]), take(self.position, [0]))

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.atleast_2d(ids)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError(f"token id out of range for vocabulary of {self.vocab_size}")
        if ids.shape[1] > self.max_positions:
            raise ValueError(f"text length {ids.shape[1]} exceeds {self.max_positions}")
        return add(take(self.token, ids), take(self.position, np.arange(ids.shape[1])))


def text_provenance(ids: np.ndarray) -> np.ndarray:
    ids = np.atleast_2d(ids)
    prov = np.full(ids.shape, Provenance.REAL, dtype=np.int8)
    prov[ids == CLS_ID] = Provenance.CLS
    prov[ids == SEP_ID] = Provenance.SEP
    prov[ids == PAD_ID] = Provenance.PAD
    return prov


def embed_text(tokens: TokenSequence | Sequence[TokenSequence] | np.ndarray, embedding: TextEmbedding) -> EmbeddingSequence:
    """Token lookup plus learned positions; length is N_l + 2 (CLS ... SEP), padded across a batch."""
    if isinstance(tokens, TokenSequence):
        ids = tokens.ids[None]
    elif isinstance(tokens, np.ndarray):
        ids = np.atleast_2d(tokens)
    else:
        ids, _ = pad_batch(tokens)
    return EmbeddingSequence(embedding(ids), text_provenance(ids), "language")


class ImageEmbedding(Module):
    def __init__(self, patch_dim: int, num_patches: int, d: int, rng: np.random.Generator):
        self.patch_dim = patch_dim
        self.num_patches = num_patches
        self.proj = Linear(patch_dim, d, rng)
        self.cls = parameter(normal(rng, (1, d)))
        self.position = parameter(normal(rng, (num_patches + 1, d)))
        _check_distinct_rows(self.position.data, "image position table")

    def cls_slot(self) -> Tensor:
        return add(self.cls, take(self.position, [0]))

    def __call__(self, patches: np.ndarray) -> Tensor:
        patches = np.asarray(patches)
        if patches.ndim == 2:
            patches = patches[None]
        if patches.shape[-1] != self.patch_dim:
            raise ValueError(f"patch length {patches.shape[-1]} does not match projection input {self.patch_dim}")
        if patches.shape[1] != self.num_patches:
            raise ValueError(f"expected {self.num_patches} patches, got {patches.shape[1]}")
        b = patches.shape[0]
        projected = self.proj(Tensor(patches))
        cls = Tensor(np.zeros((b, 1, 1), dtype=projected.data.dtype)) + self.cls
        return add(concat([cls, projected], axis=1), self.position)


def embed_image(grid: PatchGrid, embedding: ImageEmbedding) -> EmbeddingSequence:
    """Project patches, prepend [CLS], add positions; length is N_v + 1."""
    x = embedding(grid.patches)
    prov = np.full(x.shape[:2], Provenance.REAL, dtype=np.int8)
    prov[:, 0] = Provenance.CLS
    return EmbeddingSequence(x, prov, "vision")
