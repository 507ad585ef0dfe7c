import json

import pytest

from promptfill.config import PAPER_SCALE, ConfigError, TrainConfig, load_config, parse_override


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    assert load_config(tmp_path / "c.json") == TrainConfig()


def test_desk_defaults():
    c = TrainConfig()
    assert (c.d, c.heads, c.depths, c.k, c.pool_size, c.batch_size, c.total_steps) == (64, 4, [2, 2, 2], 4, 64, 32, 3000)
    assert (c.peak_lr_backbone, c.peak_lr_heads, c.weight_decay, c.warmup_frac) == (1e-4, 3e-4, 0.01, 0.1)


def test_override_wins_over_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"total_steps": 50, "tau": 0.1}))
    c = load_config(tmp_path / "c.json", ["total_steps=10", "pooling=max", "objectives=[\"itc\"]"])
    assert (c.total_steps, c.tau, c.pooling, c.objectives) == (10, 0.1, "max", ["itc"])


def test_unknown_key_listed(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"totel_steps": 5}))
    with pytest.raises(ConfigError, match="totel_steps"):
        load_config(tmp_path / "c.json")


def test_type_mismatch():
    with pytest.raises(ConfigError):
        load_config(None, ["total_steps=\"many\""])
    with pytest.raises(ConfigError):
        load_config(None, ["tau=true"])


def test_int_promotes_to_float():
    assert load_config(None, ["tau=1"]).tau == 1.0


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_override_syntax():
    assert parse_override("a=1") == ("a", 1)
    assert parse_override("p=average") == ("p", "average")
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("bad", [
    {"warmup_frac": 1.0}, {"total_steps": -1}, {"batch_size": 1}, {"heads": 3},
    {"k": 65}, {"pooling": "median"}, {"prompt_mode": "soft"}, {"objectives": ["mlm", "xyz"]},
    {"precision": "float16"}, {"tau": 0.0},
])
def test_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_mlm_only_allows_batch_one():
    TrainConfig(batch_size=1, objectives=["mlm"]).validate()


def test_paper_scale_preset_is_valid():
    c = TrainConfig(**PAPER_SCALE).validate()
    assert (c.d, c.pool_size, c.total_steps) == (768, 1024, 100_000)


def test_dict_roundtrip():
    c = TrainConfig(seed=4, objectives=["itm", "itc"])
    assert TrainConfig.from_dict(c.to_dict()) == c
