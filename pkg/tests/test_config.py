import json

import pytest

from causaltad.config import (
    RunConfig,
    apply_overrides,
    config_help_text,
    default_run_config,
    load_run_config,
    run_config_from_dict,
    save_run_config,
)
from causaltad.errors import ConfigError


def test_defaults_validate():
    cfg = default_run_config().validate()
    assert cfg.encoder.levels == 6
    assert cfg.nms.sigma == 2.0
    assert cfg.decode.score_threshold == 0.001
    assert cfg.eval.thresholds == [0.3, 0.5, 0.7]


def test_load_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "train": {"epochs": 5, "base_lr": 0.01},
        "encoder": {"levels": 3, "attention_window": 9},
        "eval": {"thresholds": [0.5], "recall_at": [[2, 0.3]]},
    }))
    cfg = load_run_config(str(path))
    assert cfg.train.epochs == 5
    assert cfg.encoder.levels == 3
    assert cfg.encoder.attention_window == 9
    assert cfg.eval.recall_at == [(2, 0.3)]


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError):
        run_config_from_dict({"nope": {}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"train": {"not_a_key": 1}})


def test_overrides():
    cfg = default_run_config()
    apply_overrides(cfg, ["train.epochs=7", "encoder.attention_window=null", "nms.method=hard"])
    assert cfg.train.epochs == 7
    assert cfg.encoder.attention_window is None
    assert cfg.nms.method == "hard"


def test_override_errors():
    cfg = default_run_config()
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train=5"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["zzz.epochs=5"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train.epochs=2.5"])


def test_type_coercion():
    cfg = default_run_config()
    apply_overrides(cfg, ["train.base_lr=1", "synth.num_videos=12"])
    assert isinstance(cfg.train.base_lr, float) and cfg.train.base_lr == 1.0
    assert cfg.synth.num_videos == 12


def test_save_and_reload_roundtrip(tmp_path):
    cfg = default_run_config()
    apply_overrides(cfg, ["train.epochs=9", "encoder.width=32"])
    path = tmp_path / "cfg.json"
    save_run_config(path, cfg)
    again = load_run_config(str(path))
    assert again.to_dict() == cfg.to_dict()


def test_help_text_lists_every_key():
    text = config_help_text()
    cfg = RunConfig()
    import dataclasses

    for section in ("synth", "encoder", "assignment", "train", "nms", "decode", "eval", "paths"):
        for f in dataclasses.fields(getattr(cfg, section)):
            assert f"{section}.{f.name}" in text
