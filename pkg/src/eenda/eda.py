"""Encoder-decoder attractor calculation.

An LSTM encoder consumes the (optionally shuffled) frame embeddings and
its final state seeds an LSTM decoder that is driven with zero inputs;
each decoder hidden state is one speaker attractor, whose existence
probability is a sigmoid of a learned linear readout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn


@dataclass
class AttractorSet:
    attractors: torch.Tensor  # (K, d)
    probs: torch.Tensor  # (K,), strictly in (0, 1)
    active_count: int


def detach_for_eda(embeddings: torch.Tensor) -> torch.Tensor:
    """Block gradient flow from everything downstream of EDA into the encoder.

    Values are numerically identical; only the autograd edge is cut.
    """
    return embeddings.detach()


def _init_forget_bias(lstm: nn.LSTM, value: float = 1.0) -> None:
    hidden = lstm.hidden_size
    for name, p in lstm.named_parameters():
        if name.startswith("bias_ih"):
            with torch.no_grad():
                p[hidden:2 * hidden] = value
        elif name.startswith("bias_hh"):
            with torch.no_grad():
                p[hidden:2 * hidden] = 0.0


class EncoderDecoderAttractor(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.encoder = nn.LSTM(d_model, d_model, num_layers=1)
        self.decoder = nn.LSTM(d_model, d_model, num_layers=1)
        self.existence = nn.Linear(d_model, 1)
        _init_forget_bias(self.encoder)
        _init_forget_bias(self.decoder)

    def encode(
        self,
        embeddings: torch.Tensor,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the encoder LSTM over time; returns final (h0, c0), each (d,).

        shuffle permutes the frame order uniformly at random (training-time
        augmentation); evaluation must pass shuffle=False.
        """
        if embeddings.shape[0] == 0:
            raise ValueError("empty embedding sequence")
        if shuffle:
            order = torch.randperm(embeddings.shape[0], generator=generator)
            embeddings = embeddings[order]
        _, (h, c) = self.encoder(embeddings.unsqueeze(1))
        return h[0, 0], c[0, 0]

    def decode(self, h0: torch.Tensor, c0: torch.Tensor, steps: int) -> AttractorSet:
        """Decode a fixed number of attractors (training uses steps = S + 1)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        zeros = torch.zeros(steps, 1, self.d_model, dtype=h0.dtype, device=h0.device)
        out, _ = self.decoder(zeros, (h0.reshape(1, 1, -1), c0.reshape(1, 1, -1)))
        attractors = out[:, 0, :]
        probs = torch.sigmoid(self.existence(attractors).squeeze(-1))
        return AttractorSet(attractors, probs, steps)

    def decode_until(
        self,
        h0: torch.Tensor,
        c0: torch.Tensor,
        threshold: float,
        max_steps: int = 20,
    ) -> AttractorSet:
        """Decode until the first existence probability below threshold.

        Decoding stops at the first sub-threshold step; active_count is the
        number of attractors decoded before it (capped at max_steps).
        """
        h = h0.reshape(1, 1, -1)
        c = c0.reshape(1, 1, -1)
        zero = torch.zeros(1, 1, self.d_model, dtype=h0.dtype, device=h0.device)
        attractors = []
        probs = []
        active = 0
        for _ in range(max_steps):
            out, (h, c) = self.decoder(zero, (h, c))
            a = out[0, 0]
            p = torch.sigmoid(self.existence(a).squeeze(-1))
            attractors.append(a)
            probs.append(p)
            if p.item() < threshold:
                break
            active += 1
        return AttractorSet(torch.stack(attractors), torch.stack(probs), active)
