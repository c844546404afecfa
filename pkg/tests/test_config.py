import pytest
import yaml

from eenda.config import ConfigError, RunConfig


class TestValidation:
    def test_empty_is_all_defaults(self):
        cfg = RunConfig({})
        assert cfg.seed == 0
        assert cfg.data["train"]["lr"] == 5e-5
        assert cfg.data["inference"]["median_frames"] == 11

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key: learning_rate"):
            RunConfig({"learning_rate": 1e-3})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="train.momentum"):
            RunConfig({"train": {"momentum": 0.9}})

    def test_unknown_domain_key(self):
        dom = {"name": "x", "speaker_count_range": [1, 2], "overlap_ratio": 0.1,
               "noise_profile": "white", "noise_snr_db": 10.0,
               "pause_scale": 0.5, "seed_namespace": 1, "accent": "irish"}
        with pytest.raises(ConfigError, match="accent"):
            RunConfig({"domains": [dom]})

    def test_duplicate_domain_names(self):
        dom = {"name": "x", "speaker_count_range": [1, 2], "overlap_ratio": 0.1,
               "noise_profile": "white", "noise_snr_db": 10.0,
               "pause_scale": 0.5, "seed_namespace": 1}
        with pytest.raises(ConfigError, match="duplicate"):
            RunConfig({"domains": [dom, dict(dom)]})

    def test_scalar_where_mapping_expected(self):
        with pytest.raises(ConfigError):
            RunConfig({"train": 5})

    def test_invalid_value_fails_fast(self):
        with pytest.raises(ValueError):
            RunConfig({"train": {"lr": -1.0}})


class TestLayering:
    def test_file_overrides_defaults(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"train": {"lr": 1e-3}}))
        cfg = RunConfig.load(p)
        assert cfg.data["train"]["lr"] == 1e-3
        assert cfg.data["train"]["epochs"] == 5  # untouched default

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"seed": 3}))
        cfg = RunConfig.load(p, {"seed": 9})
        assert cfg.seed == 9

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("")
        assert RunConfig.load(p).seed == 0

    def test_non_mapping_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            RunConfig.load(p)


class TestAccessors:
    def test_default_model_config(self):
        mc = RunConfig({}).model_config()
        assert mc.encoder.num_blocks == 4
        assert mc.encoder.d_model == 256
        assert mc.encoder.adapter_bottleneck == 32
        assert mc.encoder.domains == ("studio", "meeting", "telephone")
        assert mc.domain_head_input is None

    def test_train_config_weights(self):
        tc = RunConfig({"train": {"alpha": 0.5, "beta": 3.0}}).train_config()
        assert tc.weights.alpha == 0.5
        assert tc.weights.beta == 3.0

    def test_inference_config_adapter_mode(self):
        ic = RunConfig({}).inference_config("studio")
        assert ic.adapter_mode == "studio"
        assert ic.median_frames == 11

    def test_collar_default_zero(self):
        assert RunConfig({}).collar_s == 0.0

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig({"seed": 4, "train": {"epochs": 2}})
        out = tmp_path / "eff.yaml"
        cfg.dump(out)
        again = RunConfig(yaml.safe_load(out.read_text()))
        assert again.data == cfg.data
