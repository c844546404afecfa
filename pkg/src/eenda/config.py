"""Layered run configuration: built-in defaults < config file < CLI flags.

The file is YAML mirroring the DEFAULTS tree below; unknown keys anywhere
are rejected before any work starts.  Defaults follow the published
training/inference recipe wherever it states a value (23 log-mel bins,
25 ms / 10 ms framing, 4 encoder blocks of width 256 with 4 heads,
bottleneck 32 adapters, Adam at 5e-5, thresholds 0.5, median window 11,
collar 0.0).
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Optional

import yaml

from .datagen import DomainSpec, FeatureConfig
from .encoder import EncoderConfig
from .inference import InferenceConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULT_DOMAINS = [
    {"name": "studio", "speaker_count_range": [1, 3], "overlap_ratio": 0.1,
     "noise_profile": "white", "noise_snr_db": 20.0, "pause_scale": 0.8,
     "seed_namespace": 1},
    {"name": "meeting", "speaker_count_range": [2, 4], "overlap_ratio": 0.25,
     "noise_profile": "pink", "noise_snr_db": 10.0, "pause_scale": 0.5,
     "seed_namespace": 2},
    {"name": "telephone", "speaker_count_range": [2, 2], "overlap_ratio": 0.15,
     "noise_profile": "hum", "noise_snr_db": 8.0, "pause_scale": 1.0,
     "seed_namespace": 3},
]

DEFAULTS: dict = {
    "seed": 0,
    "domains": DEFAULT_DOMAINS,
    "simulate": {
        "mixtures_per_domain": 20,
        "duration_s": 30.0,
        "sample_rate": 8000,
    },
    "features": {
        "num_mels": 23,
        "window_s": 0.025,
        "hop_s": 0.01,
    },
    "model": {
        "num_blocks": 4,
        "d_model": 256,
        "num_heads": 4,
        "ff_hidden": 1024,
        "conv_kernel": 15,
        "subsample_factor": 10,
        "adapter_bottleneck": 32,
        "adapter_blocks": None,
        "use_summary_vector": False,
        "summary_bypasses_adapters": False,
        "domain_head_input": None,
    },
    "train": {
        "epochs": 5,
        "batch_size": 8,
        "lr": 5e-5,
        "scheduler": "constant",
        "warmup_steps": 100_000,
        "alpha": 1.0,
        "beta": 2.0,
        "adapter_dropout": 0.0,
        "crop_frames": 5000,
        "max_speakers": 4,
        "keep_best": 10,
        "val_fraction": 0.2,
    },
    "inference": {
        "diarization_threshold": 0.5,
        "existence_threshold": 0.5,
        "median_frames": 11,
        "max_decode_steps": 20,
        "collar": 0.0,
    },
}

_DOMAIN_KEYS = {
    "name", "speaker_count_range", "overlap_ratio", "noise_profile",
    "noise_snr_db", "pause_scale", "seed_namespace", "band_hz",
}


def _check_keys(data: dict, template: dict, prefix: str = "") -> None:
    for key, value in data.items():
        if key not in template:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if isinstance(template[key], dict) and key != "domains":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a mapping")
            _check_keys(value, template[key], prefix=f"{prefix}{key}.")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class RunConfig:
    """Validated, merged configuration tree with typed accessors."""

    def __init__(self, data: dict):
        _check_keys(data, DEFAULTS)
        self.data = _merge(DEFAULTS, data)
        for dom in self.data["domains"]:
            unknown = set(dom) - _DOMAIN_KEYS
            if unknown:
                raise ConfigError(f"unknown domain key(s): {sorted(unknown)}")
            if "name" not in dom:
                raise ConfigError("every domain needs a name")
        names = [d["name"] for d in self.data["domains"]]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate domain names in config")
        # fail fast on invalid values
        self.domain_specs()
        self.feature_config()
        self.model_config()
        self.train_config()
        self.inference_config()

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[dict] = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text())
            if loaded is None:
                loaded = {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must contain a mapping")
            data = loaded
        if overrides:
            data = _merge(data, overrides)
        return cls(data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def domain_specs(self) -> list[DomainSpec]:
        specs = []
        for dom in self.data["domains"]:
            kw = dict(dom)
            kw["speaker_count_range"] = tuple(kw["speaker_count_range"])
            if kw.get("band_hz") is not None:
                kw["band_hz"] = tuple(kw["band_hz"])
            specs.append(DomainSpec(**kw))
        return specs

    def domain_names(self) -> tuple[str, ...]:
        return tuple(d["name"] for d in self.data["domains"])

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self.data["features"])

    def model_config(self) -> ModelConfig:
        m = dict(self.data["model"])
        head = m.pop("domain_head_input")
        if m["adapter_blocks"] is not None:
            m["adapter_blocks"] = frozenset(m["adapter_blocks"])
        enc = EncoderConfig(
            domains=self.domain_names(),
            num_mels=self.data["features"]["num_mels"],
            **m,
        )
        return ModelConfig(encoder=enc, domain_head_input=head)

    def train_config(self) -> TrainConfig:
        t = dict(self.data["train"])
        weights = LossWeights(alpha=t.pop("alpha"), beta=t.pop("beta"))
        return TrainConfig(
            weights=weights,
            seed=self.seed,
            domain_head_input=self.data["model"]["domain_head_input"],
            **t,
        )

    def inference_config(self, adapter_mode: Optional[str] = None) -> InferenceConfig:
        inf = dict(self.data["inference"])
        inf.pop("collar")
        return InferenceConfig(adapter_mode=adapter_mode, **inf)

    @property
    def collar_s(self) -> float:
        return float(self.data["inference"]["collar"])

    def dump(self, path: Path) -> None:
        """Write the effective merged configuration for provenance."""
        Path(path).write_text(yaml.safe_dump(self.data, sort_keys=True))
