"""Multi-domain finetuning: per-sample adapter routing with adapter
dropout, Adam optimisation, per-epoch validation DER, checkpoint
selection and averaging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import (
    FeatureConfig,
    FrameFeatures,
    SpeakerActivityMatrix,
    crop_sample,
    extract_logmel,
    frames_to_labels,
    load_manifest,
    read_wav,
)
from .eda import detach_for_eda
from .inference import InferenceConfig, diarize, result_to_rttm
from .losses import (
    LossWeights,
    attractor_existence_loss,
    combined_loss,
    domain_classification_loss,
    frame_speaker_posteriors,
    pit_diarization_loss,
)
from .model import DiarizationModel, save_checkpoint
from .scoring import RttmSegment, compute_der, parse_rttm


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 5e-5
    scheduler: str = "constant"  # "constant", "warmup_constant" or "noam"
    warmup_steps: int = 100_000
    weights: LossWeights = LossWeights()
    adapter_dropout: float = 0.0
    crop_frames: int = 5000
    seed: int = 0
    domain_head_input: Optional[str] = None
    max_speakers: int = 4
    keep_best: int = 10
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.adapter_dropout <= 1.0:
            raise ValueError("adapter_dropout must be in [0,1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.scheduler not in ("constant", "warmup_constant", "noam"):
            raise ValueError(
                "scheduler must be 'constant', 'warmup_constant' or 'noam'")


@dataclass
class TrainSample:
    file_id: str
    features: FrameFeatures
    labels: SpeakerActivityMatrix
    domain: str
    reference: list[RttmSegment] = field(default_factory=list)


def load_samples(
    manifest_path: Path,
    feature_config: FeatureConfig = FeatureConfig(),
    max_speakers: int = 4,
) -> list[TrainSample]:
    """Load a simulated corpus from its manifest into memory."""
    root = Path(manifest_path).parent
    samples = []
    for rec in load_manifest(manifest_path):
        wav, sr = read_wav(root / rec["wav"])
        feats = extract_logmel(wav, sr, feature_config)
        ref = parse_rttm((root / rec["rttm"]).read_text())
        segments = [
            (s.speaker, s.onset_s, s.onset_s + s.duration_s) for s in ref
        ]
        labels = frames_to_labels(
            segments, feature_config.hop_s, feats.num_frames, max_speakers)
        samples.append(TrainSample(rec["id"], feats, labels, rec["domain"], ref))
    return samples


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """Canonical Transformer warmup schedule."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def compute_sample_losses(
    model: DiarizationModel,
    features: torch.Tensor,
    labels: torch.Tensor,
    routing_domain: Optional[str],
    true_domain: str,
    weights: LossWeights,
    max_speakers: int = 4,
    shuffle: bool = False,
    generator: Optional[torch.Generator] = None,
) -> dict:
    """Forward pass and all losses for one sample.

    The EDA input is detached so neither the attractor existence loss nor
    the attractor path of the diarization loss reaches encoder parameters;
    the encoder learns through the embedding side of the posterior dot
    products.
    """
    out = model.embed(features, routing_domain)
    emb = out.embeddings
    h0, c0 = model.eda.encode(detach_for_eda(emb), shuffle=shuffle, generator=generator)
    n_spk = labels.shape[1]
    att = model.eda.decode(h0, c0, n_spk + 1)
    l_attr = attractor_existence_loss(att.probs, n_spk)
    if n_spk > 0:
        post = frame_speaker_posteriors(att.attractors[:n_spk], emb)
        l_diar, perm = pit_diarization_loss(post, labels, max_speakers)
    else:
        l_diar, perm = emb.new_zeros(()), ()
    l_domain = None
    if model.domain_head is not None:
        if model.cfg.domain_head_input == "summary":
            v = out.summary
        else:
            v = torch.cat([h0, c0])
        l_domain, _ = domain_classification_loss(v, true_domain, model.domain_head)
    total = combined_loss(l_diar, l_attr, l_domain, weights)
    return {
        "loss": total,
        "l_diar": l_diar,
        "l_attr": l_attr,
        "l_domain": l_domain,
        "perm": perm,
    }


def route_domain(
    domain: str, adapter_dropout: float, rng: np.random.Generator
) -> Optional[str]:
    """Per-sample adapter routing: with probability adapter_dropout the
    sample is trained without adapters (domain None)."""
    if adapter_dropout > 0.0 and rng.random() < adapter_dropout:
        return None
    return domain


def train_step(
    batch: Sequence[TrainSample],
    model: DiarizationModel,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
) -> dict:
    """One optimizer update on the mean combined loss of a batch."""
    model.train()
    known = set(model.domains)
    records = []
    total = None
    for sample in batch:
        if sample.domain not in known and known:
            raise KeyError(f"sample domain {sample.domain!r} not in {sorted(known)}")
        routed = route_domain(sample.domain, cfg.adapter_dropout, rng) if known else None
        x = torch.as_tensor(sample.features.values, dtype=torch.float32)
        y = torch.as_tensor(sample.labels.values, dtype=torch.float32)
        losses = compute_sample_losses(
            model, x, y, routed, sample.domain, cfg.weights,
            cfg.max_speakers, shuffle=True, generator=generator)
        records.append(losses)
        total = losses["loss"] if total is None else total + losses["loss"]
    total = total / len(batch)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total.item()!r} in training step")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    def _mean(key):
        vals = [r[key].item() for r in records if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "loss": float(total.item()),
        "l_diar": _mean("l_diar"),
        "l_attr": _mean("l_attr"),
        "l_domain": _mean("l_domain"),
    }


def validation_der(
    model: DiarizationModel,
    samples: Sequence[TrainSample],
    infer_cfg: InferenceConfig = InferenceConfig(),
    use_domain_adapters: bool = True,
) -> float:
    """Pooled DER over a held-out split, full inference pipeline."""
    import dataclasses as _dc

    all_ref: list[RttmSegment] = []
    all_hyp: list[RttmSegment] = []
    for sample in samples:
        mode = sample.domain if use_domain_adapters and sample.domain in model.domains else None
        cfg = _dc.replace(infer_cfg, adapter_mode=mode)
        result = diarize(sample.features, model, cfg)
        all_hyp.extend(result_to_rttm(result, sample.file_id, sample.features.hop_s))
        all_ref.extend(sample.reference)
    breakdown = compute_der(all_ref, all_hyp)
    return breakdown.der


def select_best(checkpoints: Sequence[dict], k: int) -> list[dict]:
    """k checkpoint records with smallest validation_der, ties to earlier epochs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(checkpoints):
        raise ValueError(f"k={k} exceeds available checkpoints ({len(checkpoints)})")
    ranked = sorted(checkpoints, key=lambda c: (c["validation_der"], c["epoch"]))
    return ranked[:k]


def average_checkpoints(paths: Sequence[Path]) -> dict:
    """Element-wise mean of the parameter state across checkpoints."""
    if not paths:
        raise ValueError("no checkpoints to average")
    payloads = [torch.load(Path(p), map_location="cpu", weights_only=False) for p in paths]
    ref_hash = payloads[0]["config_hash"]
    for p, payload in zip(paths, payloads):
        if payload["config_hash"] != ref_hash:
            raise ValueError(f"config hash mismatch in {p}")
    avg = {}
    for key, first in payloads[0]["state"].items():
        if first.is_floating_point():
            stacked = torch.stack([pl["state"][key].double() for pl in payloads])
            avg[key] = stacked.mean(dim=0).to(first.dtype)
        else:
            avg[key] = first.clone()
    return avg


@dataclass
class TrainResult:
    model: DiarizationModel
    log: list[dict]
    checkpoint_dir: Path
    final_path: Path


def _crop(sample: TrainSample, crop_frames: int, seed: int) -> TrainSample:
    if crop_frames >= sample.features.num_frames:
        return sample
    feats, labels = crop_sample(sample.features, sample.labels, crop_frames, seed)
    return TrainSample(sample.file_id, feats, labels, sample.domain, sample.reference)


def train(
    model: DiarizationModel,
    samples: Sequence[TrainSample],
    cfg: TrainConfig,
    out_dir: Path,
    val_samples: Optional[Sequence[TrainSample]] = None,
    infer_cfg: InferenceConfig = InferenceConfig(),
    start_epoch: int = 0,
) -> TrainResult:
    """Run the finetuning loop; writes per-epoch checkpoints, a JSONL
    training log and a k-best averaged final model under out_dir."""
    if cfg.domain_head_input != model.cfg.domain_head_input:
        raise ValueError(
            f"domain_head_input mismatch: train config {cfg.domain_head_input!r} "
            f"vs model {model.cfg.domain_head_input!r}")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if val_samples is None:
        n_val = max(1, int(len(samples) * cfg.val_fraction))
        val_samples = samples[-n_val:]
        samples = samples[:-n_val] or list(val_samples)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    d_model = model.cfg.encoder.d_model

    log: list[dict] = []
    ckpt_meta: list[dict] = []
    log_path = out_dir / "train_log.jsonl"
    step = 0
    with log_path.open("a") as log_fh:
        for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
            order = rng.permutation(len(samples))
            for i in range(0, len(order), cfg.batch_size):
                batch_idx = order[i:i + cfg.batch_size]
                batch = [
                    _crop(samples[j], cfg.crop_frames, int(rng.integers(2**31 - 1)))
                    for j in batch_idx
                ]
                step += 1
                if cfg.scheduler == "noam":
                    lr = noam_lr(step, d_model, cfg.warmup_steps)
                elif cfg.scheduler == "warmup_constant":
                    lr = cfg.lr * min(1.0, step / cfg.warmup_steps)
                else:
                    lr = cfg.lr
                for group in optimizer.param_groups:
                    group["lr"] = lr
                record = train_step(batch, model, optimizer, cfg, rng, generator)
                record.update(step=step, epoch=epoch, lr=lr)
                log.append(record)
                log_fh.write(json.dumps(record) + "\n")
            der = validation_der(model, val_samples, infer_cfg)
            path = ckpt_dir / f"epoch_{epoch:04d}.pt"
            save_checkpoint(model, path, epoch=epoch, validation_der=der)
            ckpt_meta.append({"epoch": epoch, "validation_der": der, "path": path})
            summary = {"epoch": epoch, "validation_der": der, "step": step}
            log.append(summary)
            log_fh.write(json.dumps(summary) + "\n")

    k = min(cfg.keep_best, len(ckpt_meta))
    best = select_best(ckpt_meta, k)
    avg_state = average_checkpoints([c["path"] for c in best])
    model.load_state_dict(avg_state)
    final_path = out_dir / "model_final.pt"
    save_checkpoint(
        model, final_path,
        epoch=max(c["epoch"] for c in best),
        validation_der=min(c["validation_der"] for c in best))
    return TrainResult(model, log, ckpt_dir, final_path)
