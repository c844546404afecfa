"""End-to-end diarization decoding.

features -> encoder (adapter routing per config) -> attractors until the
first sub-threshold existence probability -> frame/speaker posteriors ->
binarisation -> per-speaker median filtering -> segment extraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .datagen import FrameFeatures
from .losses import frame_speaker_posteriors
from .model import DiarizationModel
from .scoring import RttmSegment


@dataclass(frozen=True)
class InferenceConfig:
    diarization_threshold: float = 0.5
    existence_threshold: float = 0.5
    median_frames: int = 11
    adapter_mode: Optional[str] = None  # domain name, or None for adapter-free
    max_decode_steps: int = 20
    predict_domain: bool = False

    def __post_init__(self):
        for name in ("diarization_threshold", "existence_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0,1), got {v}")
        if self.median_frames < 1 or self.median_frames % 2 == 0:
            raise ValueError("median_frames must be a positive odd integer")


@dataclass
class DiarizationResult:
    segments: list[tuple[int, float, float]]  # (speaker_index, start_s, end_s)
    num_speakers: int
    predicted_domain: Optional[str] = None
    domain_probs: Optional[np.ndarray] = None
    posteriors: Optional[np.ndarray] = None  # (T, S) before thresholding


def median_filter(column: np.ndarray, window: int) -> np.ndarray:
    """Sliding median of a binary column; the window shrinks symmetrically
    near the edges so it always stays odd and centred."""
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd integer")
    t = len(column)
    half = window // 2
    out = np.empty(t, dtype=column.dtype)
    for i in range(t):
        k = min(i, t - 1 - i, half)
        seg = column[i - k:i + k + 1]
        out[i] = 1 if seg.sum() * 2 > len(seg) else 0
    return out


def frames_to_segments(column: np.ndarray, hop_s: float) -> list[tuple[float, float]]:
    """Maximal runs of ones as [first*hop, (last+1)*hop) time spans."""
    spans = []
    start = None
    for i, v in enumerate(column):
        if v and start is None:
            start = i
        elif not v and start is not None:
            spans.append((start * hop_s, i * hop_s))
            start = None
    if start is not None:
        spans.append((start * hop_s, len(column) * hop_s))
    return spans


@torch.no_grad()
def diarize(
    features: FrameFeatures,
    model: DiarizationModel,
    cfg: InferenceConfig = InferenceConfig(),
) -> DiarizationResult:
    if cfg.adapter_mode is not None and cfg.adapter_mode not in model.domains:
        raise KeyError(
            f"unknown adapter domain {cfg.adapter_mode!r}; known: {sorted(model.domains)}")
    model.eval()
    x = torch.as_tensor(features.values, dtype=torch.float32)
    out = model.embed(x, cfg.adapter_mode)
    h0, c0 = model.eda.encode(out.embeddings, shuffle=False)
    att = model.eda.decode_until(
        h0, c0, cfg.existence_threshold, cfg.max_decode_steps)
    n_spk = att.active_count
    segments: list[tuple[int, float, float]] = []
    posteriors = np.zeros((features.num_frames, n_spk), dtype=np.float32)
    if n_spk > 0:
        post = frame_speaker_posteriors(att.attractors[:n_spk], out.embeddings)
        posteriors = post.numpy()
        binary = (posteriors > cfg.diarization_threshold).astype(np.int8)
        for s in range(n_spk):
            smooth = median_filter(binary[:, s], cfg.median_frames)
            for t0, t1 in frames_to_segments(smooth, features.hop_s):
                segments.append((s, t0, t1))
    active = {s for s, _, _ in segments}
    result = DiarizationResult(
        segments=sorted(segments, key=lambda seg: (seg[1], seg[0])),
        num_speakers=len(active),
        posteriors=posteriors,
    )
    if cfg.predict_domain:
        result.predicted_domain, result.domain_probs = predict_domain(features, model)
    return result


@torch.no_grad()
def predict_domain(
    features: FrameFeatures,
    model: DiarizationModel,
    adapter_mode: Optional[str] = None,
) -> tuple[str, np.ndarray]:
    """Argmax over the domain head; ties resolved by domain list order."""
    if model.domain_head is None:
        raise RuntimeError("model has no domain classification head")
    model.eval()
    x = torch.as_tensor(features.values, dtype=torch.float32)
    out = model.embed(x, adapter_mode)
    if model.cfg.domain_head_input == "summary":
        v = out.summary
    else:
        h0, c0 = model.eda.encode(out.embeddings, shuffle=False)
        v = torch.cat([h0, c0])
    logits = model.domain_head(v)
    probs = torch.softmax(logits, dim=-1).numpy()
    idx = int(np.argmax(probs))
    return model.domain_head.domains[idx], probs


def result_to_rttm(
    result: DiarizationResult, file_id: str, hop_s: float = 0.01
) -> list[RttmSegment]:
    return [
        RttmSegment(file_id, t0, t1 - t0, f"spk{s}")
        for s, t0, t1 in result.segments
        if t1 > t0
    ]
