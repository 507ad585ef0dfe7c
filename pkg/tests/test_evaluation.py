import json

import numpy as np
import pytest

from promptfill.config import TrainConfig
from promptfill.data import build_dataset, load_manifest
from promptfill.embeddings import Provenance, Vocabulary
from promptfill.evaluation import (
    AblationReport,
    ClassifierHead,
    FinetuneConfig,
    eval_texts,
    finetune_classifier,
    itm_accuracy,
    mlm_eval_loss,
    ordering_verdicts,
    recall_at_k,
    run_ablation,
    zero_shot_retrieve,
)
from promptfill.model import Unifier


def brute_recall(scores, k):
    hits = 0
    for i, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += i in order[:k]
    return hits / len(scores)


def small_config(data, **kw):
    base = dict(d=16, heads=2, depths=[1, 1, 1], pool_size=8, k=2, itc_dim=8, batch_size=8, total_steps=4,
                log_every=2, train_manifest=data["train"], eval_manifest=data["test"], vocab_path=data["vocab"])
    return TrainConfig(**{**base, **kw})


class TestRecall:
    def test_identity(self):
        assert recall_at_k(np.eye(5), 1) == 1.0

    def test_off_diagonal_max(self):
        s = np.eye(4)[[1, 2, 3, 0]] * 2 + np.eye(4)
        assert recall_at_k(s, 1) == 0.0

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_all_equal(self, k):
        assert recall_at_k(np.zeros((6, 6)), k) == k / 6

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), 4)

    def test_matches_sort_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 9))
            s = rng.integers(0, 3, size=(n, n)).astype(float)
            for k in range(1, n + 1):
                assert recall_at_k(s, k) == brute_recall(s, k)

    def test_monotone_and_full(self, rng):
        s = rng.standard_normal((7, 7))
        values = [recall_at_k(s, k) for k in range(1, 8)]
        assert values == sorted(values) and values[-1] == 1.0


@pytest.fixture(scope="module")
def model_and_data(tiny_dataset):
    cfg = small_config(tiny_dataset)
    vocab = Vocabulary.load(cfg.vocab_path)
    return Unifier(cfg, len(vocab), np.random.default_rng(0)), vocab, load_manifest(tiny_dataset["test"])


class TestRetrieve:
    def test_report_contract(self, model_and_data):
        model, vocab, manifest = model_and_data
        _, tokens = eval_texts(manifest, vocab, model.config.max_text_len)
        reports = zero_shot_retrieve(model, manifest.load_images(), tokens, ks=(1, 5, 10))
        for direction, rep in reports.items():
            assert rep.direction == direction and set(rep.recall_at) == {1, 5, 10} and rep.n == len(manifest)
            assert all(0 <= v <= 1 for v in rep.recall_at.values())

    def test_true_pairs_with_identical_vectors(self, model_and_data, monkeypatch):
        import promptfill.evaluation as ev

        model, vocab, manifest = model_and_data
        _, tokens = eval_texts(manifest, vocab, model.config.max_text_len)
        vectors = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 4)))[0].T
        monkeypatch.setattr(ev, "embed_corpus", lambda model, images=None, tokens=None: vectors)
        reports = zero_shot_retrieve(model, manifest.load_images()[:4], tokens[:4], ks=(1,))
        assert reports["i2t"].recall_at[1] == 1.0 and reports["t2i"].recall_at[1] == 1.0

    def test_permutation_invariant(self, model_and_data, rng):
        model, vocab, manifest = model_and_data
        _, tokens = eval_texts(manifest, vocab, model.config.max_text_len)
        images = manifest.load_images()
        p = rng.permutation(len(images))
        a = zero_shot_retrieve(model, images, tokens, ks=(1, 5))
        b = zero_shot_retrieve(model, images[p], [tokens[i] for i in p], ks=(1, 5))
        assert all(a[d].recall_at == b[d].recall_at for d in a)

    def test_count_mismatch(self, model_and_data):
        model, vocab, manifest = model_and_data
        _, tokens = eval_texts(manifest, vocab, model.config.max_text_len)
        with pytest.raises(ValueError):
            zero_shot_retrieve(model, manifest.load_images()[:3], tokens[:2])

    def test_untrained_near_chance(self, tmp_path):
        paths = build_dataset(256, 1.0, 4, tmp_path, (0.0, 0.0, 1.0))
        vocab = Vocabulary.load(paths["vocab"])
        manifest = load_manifest(paths["test"])
        model = Unifier(TrainConfig(d=16, heads=2, depths=[1, 1, 1], pool_size=8, k=2), len(vocab),
                        np.random.default_rng(0))
        _, tokens = eval_texts(manifest, vocab, 24)
        r1 = zero_shot_retrieve(model, manifest.load_images(), tokens, ks=(1,))["i2t"].recall_at[1]
        assert r1 <= 5 / 256

    def test_pretext_metrics_in_range(self, model_and_data):
        model, vocab, manifest = model_and_data
        _, tokens = eval_texts(manifest, vocab, model.config.max_text_len)
        images = manifest.load_images()
        assert 0 <= itm_accuracy(model, images, tokens) <= 1
        assert abs(mlm_eval_loss(model, images, tokens) - np.log(len(vocab))) < 0.5


class TestFinetune:
    def test_zero_steps_is_chance(self, tmp_path):
        paths = build_dataset(600, 1.0, 8, tmp_path, (0.5, 0.0, 0.5))
        vocab = Vocabulary.load(paths["vocab"])
        model = Unifier(TrainConfig(d=16, heads=2, depths=[1, 1, 1], pool_size=8, k=2), len(vocab),
                        np.random.default_rng(0))
        result = finetune_classifier(model, load_manifest(paths["train"]), load_manifest(paths["test"]), "image_only",
                                     vocab, FinetuneConfig(steps=0))
        assert abs(result.accuracy - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 300) + 0.05

    @pytest.mark.parametrize("task", ["image_only", "text_only", "multimodal"])
    def test_frozen_backbone_unchanged_and_reproducible(self, model_and_data, tiny_dataset, task):
        model, vocab, manifest = model_and_data
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train = load_manifest(tiny_dataset["train"])
        a = finetune_classifier(model, train, manifest, task, vocab, FinetuneConfig(steps=20, lr_backbone=0.0))
        b = finetune_classifier(model, train, manifest, task, vocab, FinetuneConfig(steps=20, lr_backbone=0.0))
        assert a.accuracy == b.accuracy and 0 <= a.accuracy <= 1
        assert a.head.input_dim == 2 * model.config.d
        assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters() if not n.startswith("prompts"))

    def test_unfrozen_updates_backbone(self, tiny_dataset):
        cfg = small_config(tiny_dataset)
        vocab = Vocabulary.load(cfg.vocab_path)
        model = Unifier(cfg, len(vocab), np.random.default_rng(0))
        before = model.backbone.fusion.layers[0].ffn.fc1.weight.data.copy()
        result = finetune_classifier(model, load_manifest(cfg.train_manifest), load_manifest(cfg.eval_manifest),
                                     "multimodal", vocab, FinetuneConfig(steps=3, lr_backbone=1e-3))
        assert not np.array_equal(before, result.model.backbone.fusion.layers[0].ffn.fc1.weight.data)
        assert np.array_equal(before, model.backbone.fusion.layers[0].ffn.fc1.weight.data)

    def test_image_only_inputs_are_prompt_filled(self, model_and_data):
        model, _, manifest = model_and_data
        x, _ = model.encode(images=manifest.load_images()[:2])
        assert (x.language_seq.provenance[:, 1:] == Provenance.PROMPT).all()

    def test_missing_labels(self, model_and_data, tiny_dataset):
        model, vocab, manifest = model_and_data
        stripped = load_manifest(tiny_dataset["train"])
        stripped.records = [{**r, "labels": {}} for r in stripped.records]
        with pytest.raises(ValueError, match="shape"):
            finetune_classifier(model, stripped, manifest, "image_only", vocab, FinetuneConfig(steps=1))

    def test_unknown_task(self, rng):
        with pytest.raises(ValueError):
            ClassifierHead(8, 4, "audio", rng)


class TestAblation:
    GRID = [{"name": "mlm", "objectives": ["mlm"]}, {"name": "itc", "objectives": ["itc"]},
            {"name": "mlm+itm", "objectives": ["mlm", "itm"]}]

    def test_report_and_replay(self, tmp_path, tiny_dataset):
        cfg = small_config(tiny_dataset)
        test = load_manifest(tiny_dataset["test"])
        ft = FinetuneConfig(steps=5)
        a = run_ablation(cfg, self.GRID, [0], [0.5, 1.0], test, tmp_path / "a", ft)
        b = run_ablation(cfg, self.GRID, [0], [0.5, 1.0], test, tmp_path / "b", ft)
        assert [r["config"] for r in a.rows] == ["mlm", "itc", "mlm+itm"]
        assert a.rows == b.rows
        assert all(set(r["vqa"]) == {"0.5", "1.0"} for r in a.rows)
        lines = (tmp_path / "a" / "ablation.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["config"]["total_steps"] == 4
        assert "config" in (tmp_path / "a" / "ablation.txt").read_text()

    def test_needs_two_configs(self, tmp_path, tiny_dataset):
        with pytest.raises(ValueError):
            run_ablation(small_config(tiny_dataset), self.GRID[:1], [0], [1.0], None, tmp_path)

    def test_majority_verdicts(self):
        grid = [{"name": "a", "objectives": ["mlm", "itm"]}, {"name": "b", "objectives": ["itc"]}]
        rows = []
        for seed, (ra, rb, va, vb) in enumerate([(0.1, 0.5, 0.9, 0.5), (0.2, 0.4, 0.4, 0.6), (0.3, 0.2, 0.8, 0.7)]):
            rows.append({"config": "a", "seed": seed, "r1_i2t": ra, "r1_t2i": ra, "vqa": {"1.0": va}})
            rows.append({"config": "b", "seed": seed, "r1_i2t": rb, "r1_t2i": rb, "vqa": {"1.0": vb}})
        v = ordering_verdicts(rows, grid, [0, 1, 2], [1.0])
        assert v["itc_beats_no_itc_on_R@1"]["holds"]
        assert v["itc_beats_no_itc_on_R@1"]["pairs"]["b>a"]["wins"] == 2
        assert v["mlm+itm_beats_itc_only_on_vqa@1"]["holds"]
        report = AblationReport(rows, v, [1.0], [0, 1, 2])
        assert "HOLDS" in report.table()
