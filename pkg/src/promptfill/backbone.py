"""Pre-norm transformer stacks: per-modality encoders feeding one fusion stack.

The fusion stack runs single-stream over the concatenated (vision, language)
sequence, so every position attends across both sides; its output is split back
into the two representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Linear, LayerNorm, MLP, Module, normal
from .numerics import Tensor, concat, matmul, parameter, softmax, swapaxes
from .prompts import UnifiedInput


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    ``mask`` flags key positions to exclude, shaped to broadcast against the (..., L_k) keys.
    """
    d_k = q.shape[-1]
    if d_k < 1:
        raise ValueError("attention needs d_k >= 1")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_k))
    exclude = None
    if mask is not None:
        exclude = np.asarray(mask, dtype=bool)
        if exclude.ndim == 1:
            exclude = exclude[None, :]
        else:
            exclude = exclude[..., None, :]
        if exclude.all(axis=-1).any():
            raise ValueError("every key is masked for some query row")
    return matmul(softmax(scores, axis=-1, exclude=exclude), v)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None) -> Tensor:
        b, length, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape((b, length, 3, h, d // h)).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        mask = None if pad_mask is None else pad_mask[:, None, :]
        ctx = attention(q, k, v, mask)
        return self.out(ctx.transpose(0, 2, 1, 3).reshape((b, length, d)))


class TransformerLayer(Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.d = d
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP(d, ffn_mult * d, d, rng)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != self.d:
            raise ValueError(f"layer width {self.d} does not match input width {x.shape[-1]}")
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.ffn(self.norm2(x))


def transformer_layer(seq: Tensor, layer: TransformerLayer, mask: np.ndarray | None = None) -> Tensor:
    return layer(seq, mask)


class Stack(Module):
    def __init__(self, depth: int, d: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.layers = [TransformerLayer(d, heads, ffn_mult, rng) for _ in range(depth)]

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


@dataclass
class BackboneOutput:
    zv: Tensor
    zl: Tensor
    vision_pad: np.ndarray
    language_pad: np.ndarray

    @property
    def zv_cls(self) -> Tensor:
        return self.zv[:, 0]

    @property
    def zl_cls(self) -> Tensor:
        return self.zl[:, 0]


class Backbone(Module):
    def __init__(
        self,
        d: int,
        heads: int,
        depths: tuple[int, int, int],
        ffn_mult: int,
        max_vision_len: int,
        max_language_len: int,
        rng: np.random.Generator,
    ):
        self.d = d
        self.max_vision_len = max_vision_len
        self.max_language_len = max_language_len
        self.vision = Stack(depths[0], d, heads, ffn_mult, rng)
        self.language = Stack(depths[1], d, heads, ffn_mult, rng)
        self.fusion = Stack(depths[2], d, heads, ffn_mult, rng)
        self.vision_type = parameter(normal(rng, (d,)))
        self.language_type = parameter(normal(rng, (d,)))
        self.final_norm = LayerNorm(d)

    def encode(self, x: Tensor, pad_mask: np.ndarray | None, modality: str) -> Tensor:
        stack = self.vision if modality == "vision" else self.language
        return stack(x, pad_mask if pad_mask is not None and pad_mask.any() else None)

    def fuse(self, hv: Tensor, hl: Tensor, vision_pad: np.ndarray, language_pad: np.ndarray) -> BackboneOutput:
        lv = hv.shape[1]
        joint = concat([hv + self.vision_type, hl + self.language_type], axis=1)
        pad = np.concatenate([vision_pad, language_pad], axis=1)
        z = self.final_norm(self.fusion(joint, pad if pad.any() else None))
        return BackboneOutput(z[:, :lv], z[:, lv:], vision_pad, language_pad)

    def __call__(self, x: UnifiedInput) -> BackboneOutput:
        return backbone_forward(x, self)


def backbone_forward(x: UnifiedInput, backbone: Backbone) -> BackboneOutput:
    """Encode each side with its own stack, fuse jointly, split back into (Zv, Zl)."""
    vs, ls = x.vision_seq, x.language_seq
    if vs.length > backbone.max_vision_len or ls.length > backbone.max_language_len:
        raise ValueError(
            f"input lengths ({vs.length}, {ls.length}) exceed limits "
            f"({backbone.max_vision_len}, {backbone.max_language_len})"
        )
    hv = backbone.encode(vs.vectors, vs.pad_mask, "vision")
    hl = backbone.encode(ls.vectors, ls.pad_mask, "language")
    return backbone.fuse(hv, hl, vs.pad_mask, ls.pad_mask)
