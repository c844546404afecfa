"""Full diarization model (encoder + EDA + optional domain head) and the
checkpoint file format.

Checkpoints are single torch.save files holding a header (format version,
serialised model config, config hash) and the parameter state dict.
Loading refuses a checkpoint whose config hash does not match the target
model's config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .eda import EncoderDecoderAttractor
from .encoder import ConformerEncoder, EncoderConfig, EncoderOutput
from .losses import DomainHead

CHECKPOINT_FORMAT_VERSION = 1

DOMAIN_HEAD_INPUTS = ("eda_states", "summary")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    domain_head_input: Optional[str] = None  # None, "eda_states" or "summary"

    def __post_init__(self):
        if self.domain_head_input is not None:
            if self.domain_head_input not in DOMAIN_HEAD_INPUTS:
                raise ValueError(
                    f"domain_head_input must be one of {DOMAIN_HEAD_INPUTS}")
            if not self.encoder.domains:
                raise ValueError("domain head requires a non-empty domain list")
            if self.domain_head_input == "summary" and not self.encoder.use_summary_vector:
                raise ValueError("summary head input requires use_summary_vector")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        blocks = d["encoder"]["adapter_blocks"]
        d["encoder"]["adapter_blocks"] = sorted(blocks) if blocks is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        if enc.get("adapter_blocks") is not None:
            enc["adapter_blocks"] = frozenset(enc["adapter_blocks"])
        enc["domains"] = tuple(enc.get("domains", ()))
        return cls(encoder=EncoderConfig(**enc),
                   domain_head_input=d.get("domain_head_input"))


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class DiarizationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConformerEncoder(cfg.encoder)
        self.eda = EncoderDecoderAttractor(cfg.encoder.d_model)
        if cfg.domain_head_input is None:
            self.domain_head = None
        else:
            dim = cfg.encoder.d_model
            if cfg.domain_head_input == "eda_states":
                dim *= 2  # h0 concatenated with c0
            self.domain_head = DomainHead(dim, cfg.encoder.domains)

    @property
    def domains(self) -> tuple[str, ...]:
        return self.cfg.encoder.domains

    def embed(self, features: torch.Tensor, domain: Optional[str] = None) -> EncoderOutput:
        return self.encoder(features, domain)


def save_checkpoint(
    model: DiarizationModel,
    path: Path,
    epoch: int = 0,
    validation_der: float = float("nan"),
) -> None:
    """Atomic checkpoint write (temp file then rename)."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "state": model.state_dict(),
        "epoch": epoch,
        "validation_der": validation_der,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: Path, model: Optional[DiarizationModel] = None) -> DiarizationModel:
    """Load a checkpoint; validates the config hash against the target model.

    With model=None a fresh model is built from the stored config.
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    stored_cfg = ModelConfig.from_dict(payload["config"])
    if model is None:
        model = DiarizationModel(stored_cfg)
    if payload["config_hash"] != config_hash(model.cfg):
        raise ValueError(
            f"checkpoint config hash mismatch: {path} was saved for a different configuration")
    model.load_state_dict(payload["state"])
    return model


def checkpoint_metadata(path: Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    return {
        "epoch": payload["epoch"],
        "validation_der": payload["validation_der"],
        "config_hash": payload["config_hash"],
    }
