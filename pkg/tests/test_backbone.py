import math

import numpy as np
import pytest

from promptfill.backbone import Backbone, TransformerLayer, attention, backbone_forward, transformer_layer
from promptfill.config import TrainConfig
from promptfill.embeddings import tokenize
from promptfill.model import Unifier
from promptfill.numerics import Tensor, precision, tsum


def small_config(**kw):
    base = dict(d=16, heads=2, depths=[1, 1, 1], pool_size=8, k=2, itc_dim=8, max_text_len=8)
    return TrainConfig(**{**base, **kw})


class TestAttention:
    def test_single_key(self, rng):
        q, k = rng.standard_normal((1, 4)), None
        v = rng.standard_normal((1, 3))
        out = attention(Tensor(q), Tensor(q), Tensor(v))
        np.testing.assert_allclose(out.data, v, atol=1e-6)

    def test_identical_keys_average_values(self, rng):
        keys = np.repeat(rng.standard_normal((1, 4)), 3, axis=0)
        v = rng.standard_normal((3, 2))
        out = attention(Tensor(rng.standard_normal((2, 4))), Tensor(keys), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v.mean(0, keepdims=True), 2, 0), atol=1e-6)

    def test_two_keys_ln2_apart(self):
        with precision("float64"):
            d = 4
            q = np.array([[1.0, 0, 0, 0]])
            keys = np.array([[math.log(2) * math.sqrt(d), 0, 0, 0], [0, 0, 0, 0]])
            v = np.array([[3.0, 0.0], [0.0, 6.0]])
            out = attention(Tensor(q), Tensor(keys), Tensor(v)).data
        np.testing.assert_allclose(out, [[2.0, 2.0]], atol=1e-12)

    def test_all_masked_row(self, rng):
        x = Tensor(rng.standard_normal((2, 4)))
        with pytest.raises(ValueError):
            attention(x, x, x, np.array([True, True]))

    def test_convex_combination(self, rng):
        for _ in range(20):
            q, k, v = (rng.standard_normal((5, 3)) for _ in range(3))
            mask = rng.random(5) < 0.4
            mask[rng.integers(5)] = False
            out = attention(Tensor(q), Tensor(k), Tensor(v), mask).data
            live = v[~mask]
            assert np.all(out >= live.min(0) - 1e-6) and np.all(out <= live.max(0) + 1e-6)


class TestLayer:
    def test_shape_preserved(self, rng):
        layer = TransformerLayer(8, 2, 4, rng)
        for length in (1, 3, 9):
            assert transformer_layer(Tensor(rng.standard_normal((2, length, 8))), layer).shape == (2, length, 8)

    def test_zero_projections_identity(self, rng):
        layer = TransformerLayer(8, 2, 4, rng)
        for lin in (layer.attn.out, layer.ffn.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        x = rng.standard_normal((1, 5, 8))
        np.testing.assert_array_equal(layer(Tensor(x)).data, Tensor(x).data)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            TransformerLayer(8, 2, 4, rng)(Tensor(np.zeros((1, 3, 6))))

    def test_padding_invariance(self, rng):
        layer = TransformerLayer(8, 2, 4, rng)
        x = rng.standard_normal((1, 5, 8))
        mask = np.array([[False, False, False, True, True]])
        y = x.copy()
        y[0, 3:] = rng.standard_normal((2, 8)) * 10
        a, b = layer(Tensor(x), mask).data, layer(Tensor(y), mask).data
        np.testing.assert_array_equal(a[0, :3], b[0, :3])

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ValueError):
            TransformerLayer(10, 3, 4, rng)


class TestForward:
    @pytest.fixture
    def model(self):
        return Unifier(small_config(), 40, np.random.default_rng(0))

    @pytest.fixture
    def tokens(self):
        from promptfill.embeddings import build_vocab

        vocab = build_vocab("a red circle on a dark ground", 40)
        return [tokenize("red circle on", vocab, 8), tokenize("a red circle on a dark ground", vocab, 8)]

    def test_pair_lengths(self, model, tokens, rng):
        x, out = model.encode(images=rng.random((1, 32, 32, 3)), tokens=tokens[:1])
        assert out.zv.shape[1] == 17 and out.zl.shape[1] == 5
        np.testing.assert_array_equal(out.zv_cls.data, out.zv.data[:, 0])
        np.testing.assert_array_equal(out.zl_cls.data, out.zl.data[:, 0])

    def test_image_only_lengths(self, model, rng):
        _, out = model.encode(images=rng.random((3, 32, 32, 3)))
        assert out.zl.shape == (3, 3, 16)

    def test_deterministic(self, model, tokens, rng):
        images = rng.random((2, 32, 32, 3))
        a = model.encode(images=images, tokens=tokens)[1].zl.data
        b = model.encode(images=images, tokens=tokens)[1].zl.data
        assert np.array_equal(a, b)

    def test_pad_positions_do_not_leak(self, model, tokens, rng):
        images = rng.random((2, 32, 32, 3))
        batched = model.encode(images=images, tokens=tokens)[1]
        alone = model.encode(images=images[:1], tokens=tokens[:1])[1]
        np.testing.assert_allclose(batched.zl.data[0, :5], alone.zl.data[0], atol=1e-5)
        np.testing.assert_allclose(batched.zv.data[0], alone.zv.data[0], atol=1e-5)

    def test_over_length(self, rng):
        cfg = small_config()
        model = Unifier(cfg, 40, rng)
        x = model.unify(model.embed_images(rng.random((1, 32, 32, 3))), None)
        model.backbone.max_vision_len = 5
        with pytest.raises(ValueError, match="exceed"):
            backbone_forward(x, model.backbone)

    def test_prompt_entries_receive_gradient(self):
        nonzero = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = Unifier(small_config(), 40, rng)
            x, out = model.encode(images=rng.random((1, 32, 32, 3)))
            tsum(out.zl * Tensor(rng.standard_normal(out.zl.shape))).backward()
            chosen = x.selections["language"].indices[0]
            grad = model.prompts.language_pool.entries.grad
            nonzero += bool(np.all(np.abs(grad[chosen]).sum(axis=1) > 0))
        assert nonzero >= 19

    def test_paper_scale_shapes(self):
        cfg = TrainConfig(d=768, heads=12, depths=[1, 1, 1], image_size=288, patch_size=16, pool_size=16)
        backbone = Backbone(cfg.d, cfg.heads, cfg.depths, cfg.ffn_mult, 325, 26, np.random.default_rng(0))
        assert backbone.vision.layers[0].attn.qkv.weight.shape == (768, 2304)
