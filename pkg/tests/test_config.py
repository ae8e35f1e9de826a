from __future__ import annotations

from argparse import Namespace

import pytest
import yaml

from neonet.config import OUTPUT_ENV, PRESETS, RunConfig
from neonet.errors import ConfigError


def test_defaults_match_full_scale_run():
    config = RunConfig.build()
    assert (config.n_pos, config.n_neg, config.folds) == (44, 84, 5)
    assert config.schedule_steps == 1000
    assert config.crop.size == (96, 96, 48)
    assert config.ratios == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_desk_preset():
    config = RunConfig.build("desk")
    assert config.schedule_steps == 50
    assert config.crop.size == (24, 24, 12)
    assert config.n_pos + config.n_neg == 32


def test_every_preset_key_is_known():
    for values in PRESETS.values():
        assert set(values) <= RunConfig.keys()


def test_yaml_file_overrides_preset(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"schedule_steps": 20, "ratios": [0.0, 1.0]}))
    config = RunConfig.build("desk", path)
    assert config.schedule_steps == 20
    assert config.ratios == [0.0, 1.0]
    assert config.vae_steps == 300


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\n")
    config = RunConfig.build("desk", path, {"seed": 9, "output_dir": None})
    assert config.seed == 9
    assert config.output_dir is None


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("shedule_steps: 10\n")
    with pytest.raises(ConfigError, match="unknown config key 'shedule_steps'"):
        RunConfig.build(path=path)


@pytest.mark.parametrize(
    "overrides,key",
    [
        ({"crop_size": [24, 24, 10]}, "crop_size"),
        ({"n_pos": 30, "n_neg": 20}, "n_neg"),
        ({"n_pos": 3}, "folds"),
        ({"ratios": [0.5, 0.25]}, "ratios"),
        ({"ratios": [1.5]}, "ratios"),
        ({"dab_count": 4}, "dab_count"),
        ({"channel_only": True, "spatial_only": True}, "channel_only"),
        ({"precision": "float16"}, "precision"),
        ({"beta_start": 0.5, "beta_end": 0.1}, "beta_start"),
    ],
)
def test_invalid_values_name_their_key(overrides, key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.build("desk", overrides=overrides)


def test_missing_file_and_bad_preset(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.build(path=tmp_path / "absent.yaml")
    with pytest.raises(ConfigError, match="unknown preset"):
        RunConfig.build("huge")


def test_non_mapping_file(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.build(path=path)


def test_hash_ignores_output_location():
    a = RunConfig.build("desk", overrides={"output_dir": "/tmp/a"})
    b = RunConfig.build("desk", overrides={"output_dir": "/tmp/b"})
    c = RunConfig.build("desk", overrides={"seed": 1})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16


def test_output_root_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert str(RunConfig.build().output_root) == "neonet-out"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert RunConfig.build().output_root == tmp_path / "env"
    assert RunConfig.build(overrides={"output_dir": str(tmp_path / "flag")}).output_root == tmp_path / "flag"


def test_stage_settings():
    config = RunConfig.build("desk", overrides={"seed": 2})
    settings = config.train_settings("ldm", fold=3)
    assert (settings.steps, settings.lr, settings.batch, settings.seed) == (200, 1e-3, 4, 2003)
    classifier = config.classifier_settings(fold=1, epochs=5)
    assert (classifier.epochs, classifier.patience, classifier.seed) == (5, 10, 2001)
    assert config.ablation().label == "2dab"


def test_from_args(tmp_path):
    args = Namespace(preset="desk", config=None, seed=4, output_dir=tmp_path, verbose=True)
    config = RunConfig.from_args(args)
    assert config.seed == 4
    assert config.output_root == tmp_path
    assert config.verbose is True
