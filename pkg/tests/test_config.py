import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from modules.concat import ConcatTemplate
from utils.config import DESK_SHIFT, RunConfig, apply_overrides, from_dict, load_config, preset, save_config
from utils.errors import ConfigError


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


class TestPresets:
    def test_desk(self):
        cfg = preset("desk")
        assert (cfg.sensor.h, cfg.sensor.w) == (32, 256)
        assert cfg.model.input_hw == (32, 256)
        assert cfg.domains.scenes == 200
        assert cfg.domains.shift == DESK_SHIFT
        assert cfg.template() == ConcatTemplate(2, 2)
        assert cfg.dtype == np.float64

    def test_full(self):
        cfg = preset("full")
        assert cfg.model.input_hw == (32, 1920)
        assert cfg.domains.scenes == 1000
        assert cfg.train.round_epochs == (20, 20)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            preset("laptop")

    def test_named_loading(self):
        assert load_config("full").sensor.w == 1920
        assert load_config("desk").digest() == preset("desk").digest()

    def test_shipped_desk_file_matches_preset(self):
        path = Path(__file__).resolve().parent.parent / "configs" / "desk.json"
        cfg = load_config(str(path))
        expected = preset("desk")
        assert cfg.digest() == expected.digest()
        assert cfg.domains == expected.domains
        assert (cfg.train, cfg.pseudo, cfg.augment) == (expected.train, expected.pseudo, expected.augment)


class TestJsonConfig:
    def test_sensor_drives_model_input(self, tmp_path):
        cfg = load_config(write_json(tmp_path / "c.json", {"sensor": {"h": 16, "w": 64}}))
        assert cfg.model.input_hw == (16, 64)
        assert cfg.scene_recipe().sensor.azimuth_bins == 64

    def test_preset_key_and_sections(self, tmp_path):
        data = {
            "preset": "full",
            "seed": 5,
            "model": {"regularized": False},
            "train": {"round_epochs": [2, 1]},
            "pseudo": {"k": [0.3, 0.6], "sigma": 0.5},
            "domains": {"scenes": 10, "shift": {"intensity_shift": -0.3}},
            "concat": {"m": 4, "n": 2},
        }
        cfg = load_config(write_json(tmp_path / "c.json", data))
        assert cfg.seed == 5
        assert cfg.model.input_hw == (32, 1920)
        assert not cfg.model.regularized
        assert cfg.train.round_epochs == (2, 1)
        assert cfg.pseudo.k == (0.3, 0.6)
        assert cfg.domains.scenes == 10
        assert cfg.domains.shift.intensity_shift == -0.3
        assert cfg.domains.shift.class_mixture == DESK_SHIFT.class_mixture
        assert cfg.template() == ConcatTemplate(4, 2)

    @pytest.mark.parametrize("data", [
        {"optimizer": {}},
        {"train": {"epochs": 3}},
        {"model": {"depth": 9}},
        {"domains": {"source": {"colour": 1}}},
        {"pseudo": {"sigma": 1.5}},
        {"sensor": {"h": 0}},
        {"concat": "diagonal"},
        {"precision": "f16"},
        {"train": []},
    ])
    def test_invalid(self, tmp_path, data):
        with pytest.raises(ConfigError):
            load_config(write_json(tmp_path / "c.json", data))

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(bad))
        with pytest.raises(ConfigError):
            load_config(write_json(tmp_path / "list.json", [1, 2]))

    def test_save_and_reload(self, tiny_config, tmp_path):
        cfg = tiny_config(concat="bearing-4", seed=9)
        path = save_config(cfg, tmp_path)
        again = load_config(str(path))
        assert again.to_dict() == cfg.to_dict()
        assert again.digest() == cfg.digest()


class TestOverrides:
    def test_flags_win(self):
        cfg = apply_overrides(preset("desk"), seed=7, precision="f32", threads=2)
        assert (cfg.seed, cfg.precision, cfg.threads) == (7, "f32", 2)
        assert cfg.dtype == np.float32

    def test_invalid_flags(self):
        with pytest.raises(ConfigError):
            apply_overrides(preset("desk"), precision="f8")
        with pytest.raises(ConfigError):
            apply_overrides(preset("desk"), threads=0)

    def test_base_is_not_mutated(self):
        base = preset("desk")
        apply_overrides(base, seed=99)
        assert base.seed == 0


class TestDigest:
    def test_ignores_training_knobs(self):
        cfg = preset("desk")
        assert replace(cfg, seed=4, pseudo=replace(cfg.pseudo, sigma=0.9)).digest() == cfg.digest()

    def test_tracks_sensor_and_model(self, tiny_config):
        cfg = tiny_config()
        assert from_dict({"sensor": {"max_range": 50.0}}, cfg).digest() != cfg.digest()
        assert from_dict({"model": {"negative_slope": 0.1}}, cfg).digest() != cfg.digest()

    def test_mismatched_input_rejected(self, tiny_config):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            RunConfig(sensor=cfg.sensor, model=replace(cfg.model, input_hw=(4, 4))).validate()
