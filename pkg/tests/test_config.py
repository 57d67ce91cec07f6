import numpy as np
import pytest
import yaml

from fedconv.config import DESK_PRESET, ExperimentConfig, dump_config, from_dict, load_config
from fedconv.errors import ConfigurationError


class TestDefaults:
    def test_paper_hyperparameters(self):
        cfg = ExperimentConfig()
        assert cfg.rounds == 100
        assert (cfg.local_epochs, cfg.local_lr) == (5, 0.001)
        assert (cfg.conv_epochs, cfg.tc_epochs) == (20, 20)
        assert (cfg.t_max, cfg.lr_min, cfg.lr_max) == (4, 1e-5, 1e-3)
        assert (cfg.s_p, cfg.s_n) == (0.85, 0.001)
        assert (cfg.agg_epochs, cfg.agg_lr, cfg.lam, cfg.agg_optimizer) == (10, 0.001, 0.2, "sgd")
        assert cfg.pretrain_epochs == 5
        assert (cfg.stride, cfg.padding) == (1, 0)
        assert cfg.sr_grid == (0.25, 0.5, 0.75, 1.0)

    def test_desk_preset(self):
        cfg = from_dict({"preset": "desk"})
        for key, value in DESK_PRESET.items():
            assert getattr(cfg, key) == value
        assert cfg.rounds == 30 and cfg.n_clients == 20

    def test_explicit_keys_override_preset(self):
        assert from_dict({"preset": "desk", "rounds": 3}).rounds == 3


class TestValidation:
    @pytest.mark.parametrize("bad", [
        {"alpha": 0}, {"sr_grid": [0.0, 1.0]}, {"sr_grid": [1.5]}, {"n_clients": 0}, {"aggregation": "mean"},
        {"lr_max": 1e-6}, {"lam": -1}, {"rounds": -1}, {"participation": 0}, {"dataset": "cifar"},
        {"dataset": "idx"}, {"schema_version": 2}, {"preset": "huge"}, {"optimizer": "rmsprop"},
        {"agg_optimizer": "lbfgs"},
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            from_dict(bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            from_dict({"roundz": 3})

    def test_not_a_mapping(self):
        with pytest.raises(ConfigurationError):
            from_dict([1, 2])


class TestSeeds:
    def test_streams_differ(self):
        cfg = ExperimentConfig(seed=3)
        seeds = {s: cfg.sub_seed(s) for s in ("split", "partition", "init", "training")}
        assert len(set(seeds.values())) == 4

    def test_explicit_stream_leaves_others(self):
        a = ExperimentConfig(seed=3)
        b = a.replace(seed_partition=42)
        assert b.sub_seed("partition") == 42
        for s in ("split", "init", "training"):
            assert a.sub_seed(s) == b.sub_seed(s)

    def test_unknown_stream(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig().sub_seed("weather")


class TestFiles:
    def test_roundtrip(self, tmp_path):
        cfg = from_dict({"preset": "desk", "seed": 7, "sr_grid": [0.5, 1.0]})
        back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
        assert back == cfg

    def test_yaml_is_flat(self, tmp_path):
        raw = yaml.safe_load(dump_config(ExperimentConfig(), tmp_path / "c.yaml").read_text())
        assert all(not isinstance(v, dict) for v in raw.values())
        assert raw["schema_version"] == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.yaml")

    def test_empty_file_is_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == ExperimentConfig()

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("rounds: [1,\n")
        with pytest.raises(ConfigurationError):
            load_config(path)
