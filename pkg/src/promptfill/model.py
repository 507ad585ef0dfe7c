"""The full model: embedders, prompt bank, backbone, and the three pretraining heads."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, BackboneOutput, backbone_forward
from .config import TrainConfig
from .embeddings import (
    EmbeddingSequence,
    ImageEmbedding,
    TextEmbedding,
    TokenSequence,
    embed_text,
    pad_batch,
    patchify,
    embed_image,
)
from .layers import Module
from .numerics import Tensor
from .objectives import ItcHead, ItmHead, MlmHead
from .prompts import PromptBank, UnifiedInput, unify_input

# parameter-name prefixes trained at the backbone rate; everything else uses the head rate
BACKBONE_PREFIXES = ("text_embed.", "image_embed.", "backbone.vision.", "backbone.language.")


class Unifier(Module):
    def __init__(self, config: TrainConfig, vocab_size: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.config = c
        self.vocab_size = vocab_size
        num_patches = (c.image_size // c.patch_size) ** 2
        patch_dim = c.patch_size * c.patch_size * c.channels
        self.text_embed = TextEmbedding(vocab_size, c.max_text_len, c.d, rng)
        self.image_embed = ImageEmbedding(patch_dim, num_patches, c.d, rng)
        self.prompts = PromptBank(c.d, c.pool_size, c.k, c.prompt_mode, c.pooling, rng)
        self.backbone = Backbone(
            c.d, c.heads, tuple(c.depths), c.ffn_mult, max(num_patches + 1, c.k + 1), c.max_text_len + 2, rng
        )
        self.mlm_head = MlmHead(c.d, vocab_size, rng)
        self.itm_head = ItmHead(c.d, rng)
        self.itc_head = ItcHead(c.d, c.itc_dim, rng)

    # -- embedding -------------------------------------------------------------
    def embed_images(self, images: np.ndarray) -> EmbeddingSequence:
        return embed_image(patchify(np.asarray(images, dtype=np.float64), self.config.patch_size), self.image_embed)

    def embed_texts(self, tokens: list[TokenSequence] | np.ndarray) -> EmbeddingSequence:
        ids = tokens if isinstance(tokens, np.ndarray) else pad_batch(tokens)[0]
        return embed_text(ids, self.text_embed)

    def cls_slots(self) -> dict[str, Tensor]:
        return {"vision": self.image_embed.cls_slot(), "language": self.text_embed.cls_slot()}

    def unify(self, vision: EmbeddingSequence | None, language: EmbeddingSequence | None) -> UnifiedInput:
        return unify_input(vision, language, self.prompts, self.cls_slots())

    # -- forward ---------------------------------------------------------------
    def forward(self, x: UnifiedInput) -> BackboneOutput:
        return backbone_forward(x, self.backbone)

    def encode(self, images: np.ndarray | None = None, tokens=None) -> tuple[UnifiedInput, BackboneOutput]:
        vision = None if images is None else self.embed_images(images)
        language = None if tokens is None else self.embed_texts(tokens)
        x = self.unify(vision, language)
        return x, self.forward(x)

    def itc_embed(self, images: np.ndarray | None = None, tokens=None) -> Tensor:
        return itc_embed(self, images=images, tokens=tokens)

    def parameter_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        backbone = [n for n in names if n.startswith(BACKBONE_PREFIXES)]
        return {"backbone": backbone, "heads": [n for n in names if n not in set(backbone)]}


def itc_embed(model: Unifier, images: np.ndarray | None = None, tokens=None) -> Tensor:
    """Single-modality forward, own-side CLS, projection, L2 normalization: (B, itc_dim)."""
    if (images is None) == (tokens is None):
        raise ValueError("itc_embed takes exactly one modality (image-only or text-only)")
    x, out = model.encode(images=images, tokens=tokens)
    if images is not None:
        return model.itc_head(out.zv_cls, "vision")
    return model.itc_head(out.zl_cls, "language")
