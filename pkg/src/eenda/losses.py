"""Training objectives: PIT diarization loss, attractor existence loss,
domain classification loss and their weighted combination."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _bce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Element-wise binary cross-entropy with probability clamping."""
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p))


def frame_speaker_posteriors(
    attractors: torch.Tensor, embeddings: torch.Tensor
) -> torch.Tensor:
    """Per-frame speaker activity posteriors: sigmoid of attractor-embedding dot products."""
    if attractors.shape[-1] != embeddings.shape[-1]:
        raise ValueError(
            f"dim mismatch: attractors {attractors.shape} vs embeddings {embeddings.shape}")
    return torch.sigmoid(embeddings @ attractors.T)  # (T, S)


def pit_diarization_loss(
    posteriors: torch.Tensor,
    labels: torch.Tensor,
    max_speakers: int = 4,
) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant BCE over speaker columns, normalised by 1/(T*S).

    Returns the minimum loss and the argmin permutation (applied to the
    posterior columns); ties go to the lexicographically smallest
    permutation.
    """
    if posteriors.shape != labels.shape:
        raise ValueError("posteriors and labels must have the same shape")
    t, s = posteriors.shape
    if s > max_speakers:
        raise ValueError(f"S={s} exceeds the PIT limit of {max_speakers} speakers")
    if s == 0:
        return posteriors.new_zeros(()), ()
    best_loss = None
    best_perm = None
    for perm in itertools.permutations(range(s)):
        loss = _bce(posteriors[:, perm], labels).sum() / (t * s)
        if best_loss is None or loss.item() < best_loss.item():
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def attractor_existence_loss(probs: torch.Tensor, num_speakers: int) -> torch.Tensor:
    """BCE against (1,...,1,0) with num_speakers ones, normalised by 1/(S+1)."""
    if probs.shape[0] != num_speakers + 1:
        raise ValueError(
            f"expected {num_speakers + 1} probabilities, got {probs.shape[0]}")
    target = torch.zeros_like(probs)
    target[:num_speakers] = 1.0
    return _bce(probs, target).sum() / (num_speakers + 1)


class DomainHead(nn.Module):
    """Residual feed-forward plus a projection to domain logits.

    The printed formulation softmaxes v + FF(v) directly, which only types
    when dim(v) equals the number of domains; the output projection is the
    minimal completion.
    """

    def __init__(self, input_dim: int, domains: Sequence[str]):
        super().__init__()
        if not domains:
            raise ValueError("at least one domain required")
        self.domains = tuple(domains)
        self.ff1 = nn.Linear(input_dim, input_dim)
        self.ff2 = nn.Linear(input_dim, input_dim)
        self.out_proj = nn.Linear(input_dim, len(self.domains))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        z = v + self.ff2(F.silu(self.ff1(v)))
        return self.out_proj(z)  # logits over domains


def domain_classification_loss(
    v: torch.Tensor, true_domain: str, head: DomainHead
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy of the domain head; returns (loss, probs over domains)."""
    if true_domain not in head.domains:
        raise KeyError(f"unknown domain {true_domain!r}; known: {head.domains}")
    logits = head(v)
    log_probs = torch.log_softmax(logits, dim=-1)
    idx = head.domains.index(true_domain)
    return -log_probs[idx], torch.softmax(logits, dim=-1)


def combined_loss(
    l_diar: torch.Tensor,
    l_attr: torch.Tensor,
    l_domain: Optional[torch.Tensor],
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    total = l_diar + weights.alpha * l_attr
    if l_domain is not None:
        total = total + weights.beta * l_domain
    return total
