"""Strict config parsing: unknown keys rejected, precedence honored,
resolved dumps round-trip."""

import pytest

from tribranch.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_mapping,
    dump_config,
    load_config,
    write_resolved,
)
from tribranch.data import DomainShift


def test_empty_mapping_gives_defaults():
    cfg = config_from_mapping({})
    assert cfg == RunConfig()
    assert cfg.train.pretrain_iters == 2000
    assert cfg.scenes.count == 200
    assert cfg.arch.num_classes == 8


def test_defaults_round_trip_through_yaml(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(dump_config(RunConfig()))
    assert load_config(path) == RunConfig()


def test_partial_sections_keep_other_defaults():
    cfg = config_from_mapping({"train": {"seed": 9}})
    assert cfg.train.seed == 9
    assert cfg.train.alpha == 1000.0


@pytest.mark.parametrize(
    "raw, fragment",
    [
        ({"trainz": {}}, "unknown section"),
        ({"train": {"learning_rat": 0.1}}, "unknown key"),
        ({"scenes": {"target_shift": {"hue": 3}}}, "unknown key"),
        ({"train": 7}, "expected a mapping"),
        ({"train": {"rounds": 0}}, "rounds"),
        ({"arch": {"base_layers": "wat"}}, "triples"),
    ],
)
def test_bad_configs_rejected(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_mapping(raw)


def test_root_must_be_mapping():
    with pytest.raises(ConfigError, match="config root"):
        config_from_mapping([1, 2])


def test_layer_lists_become_tuples():
    cfg = config_from_mapping({"arch": {
        "base_layers": [[4, 3, 1]],
        "branch_layers": [[4, 3, 2], [8, 1, 1]],
    }})
    assert cfg.arch.base_layers == [(4, 3, 1)]
    assert cfg.arch.branch_layers == [(4, 3, 2), (8, 1, 1)]


def test_nested_shift_parsed():
    cfg = config_from_mapping({"scenes": {"target_shift": {"hue_rotation": 10.0}}})
    assert cfg.scenes.target_shift == DomainShift(hue_rotation=10.0)
    # untouched nested defaults survive
    assert cfg.scenes.source_shift == DomainShift()


def test_overrides_beat_file_values():
    cfg = config_from_mapping({"train": {"seed": 5, "alpha": 2.0}})
    out = apply_overrides(cfg, {"train.seed": 9, "train.beta": None})
    assert out.train.seed == 9
    assert out.train.alpha == 2.0  # not overridden
    assert out.train.beta == cfg.train.beta  # None means "flag absent"


def test_override_validation_still_applies():
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"train.threshold": 2.0})


def test_unknown_override_rejected():
    with pytest.raises(ConfigError, match="unknown override"):
        apply_overrides(RunConfig(), {"train.not_a_knob": 1})


def test_run_dir_keyed_by_tag_and_seed():
    cfg = config_from_mapping({"output": {"root": "out", "tag": "exp"}, "train": {"seed": 42}})
    assert str(cfg.run_dir) == "out/exp-seed42"


def test_write_resolved_is_loadable(tmp_path):
    cfg = config_from_mapping({"train": {"seed": 4}, "output": {"tag": "t"}})
    path = write_resolved(cfg, tmp_path)
    assert path.name == "config.yaml"
    assert load_config(path) == cfg
