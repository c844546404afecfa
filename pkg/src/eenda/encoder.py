"""Conformer encoder with per-domain adapters and a summary vector.

The encoder consumes frame features (T, F), subsamples them with strided
convolutions, runs a stack of Conformer blocks (half-step feed-forward,
self-attention without positional encodings, convolution module, second
half-step feed-forward, final layer norm), applies the selected domain's
adapter after each configured block, and upsamples back to the input
frame rate.  When enabled, a learnable summary vector is prepended after
subsampling; it bypasses the convolution module and, optionally, the
adapters via the same split/concat mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    d_model: int = 256
    num_heads: int = 4
    ff_hidden: int = 1024
    conv_kernel: int = 15
    subsample_factor: int = 10
    adapter_bottleneck: int = 32
    adapter_blocks: Optional[frozenset[int]] = None  # 1-based; None = all blocks
    use_summary_vector: bool = False
    summary_bypasses_adapters: bool = False
    domains: tuple[str, ...] = ()
    num_mels: int = 23

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter_bottleneck must be >= 1")
        blocks = self.effective_adapter_blocks()
        if not blocks <= set(range(1, self.num_blocks + 1)):
            raise ValueError("adapter_blocks outside 1..num_blocks")
        if len(set(self.domains)) != len(self.domains):
            raise ValueError("duplicate domain names")

    def effective_adapter_blocks(self) -> frozenset[int]:
        if self.adapter_blocks is None:
            return frozenset(range(1, self.num_blocks + 1))
        return frozenset(self.adapter_blocks)


class EncoderOutput(NamedTuple):
    embeddings: torch.Tensor  # (T, d_model), at the input frame rate
    summary: Optional[torch.Tensor]  # (d_model,) when the summary vector is enabled


def adapter_param_count(d_model: int, bottleneck: int) -> int:
    # LN gain+bias, down projection, up projection
    return 2 * d_model + d_model * bottleneck + bottleneck + bottleneck * d_model + d_model


class FeedForwardModule(nn.Module):
    """LN -> linear -> Swish -> linear, returned without residual scaling."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, hidden)
        self.linear2 = nn.Linear(hidden, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear2(F.silu(self.linear1(self.norm(x))))


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention, no positions, no mask."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.d_k = d_model // num_heads
        self.linear_q = nn.Linear(d_model, d_model)
        self.linear_k = nn.Linear(d_model, d_model)
        self.linear_v = nn.Linear(d_model, d_model)
        self.linear_out = nn.Linear(d_model, d_model)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        q = self.linear_q(x).reshape(n, self.num_heads, self.d_k).transpose(0, 1)
        k = self.linear_k(x).reshape(n, self.num_heads, self.d_k).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.d_k)
        return torch.softmax(scores, dim=-1)  # (heads, N, N)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        att = self.attention_weights(x)
        v = self.linear_v(x).reshape(n, self.num_heads, self.d_k).transpose(0, 1)
        out = (att @ v).transpose(0, 1).reshape(n, -1)
        return self.linear_out(out)


class ConvModule(nn.Module):
    """Pointwise conv -> GLU -> depthwise conv -> LN -> Swish -> pointwise conv.

    The summary row (row 0), when present, is split off before and
    concatenated back after, untouched.
    """

    def __init__(self, d_model: int, kernel: int):
        super().__init__()
        self.pointwise1 = nn.Conv1d(d_model, 2 * d_model, kernel_size=1)
        self.depthwise = nn.Conv1d(
            d_model, d_model, kernel_size=kernel,
            padding=kernel // 2, groups=d_model)
        self.norm = nn.LayerNorm(d_model)
        self.pointwise2 = nn.Conv1d(d_model, d_model, kernel_size=1)

    def forward(self, x: torch.Tensor, summary_present: bool = False) -> torch.Tensor:
        if summary_present:
            head, body = x[:1], x[1:]
        else:
            head, body = x[:0], x
        y = body.transpose(0, 1).unsqueeze(0)  # (1, d, N)
        y = F.glu(self.pointwise1(y), dim=1)
        y = self.depthwise(y)
        y = self.norm(y.transpose(1, 2)).transpose(1, 2)
        y = self.pointwise2(F.silu(y))
        y = y.squeeze(0).transpose(0, 1)
        return torch.cat([head, y], dim=0)


class Adapter(nn.Module):
    """Residual bottleneck adapter: x + up(Swish(down(LN(x)))).

    The up projection is zero-initialised so a fresh adapter is an exact
    identity.
    """

    def __init__(self, d_model: int, bottleneck: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.down = nn.Linear(d_model, bottleneck)
        self.up = nn.Linear(bottleneck, d_model)
        nn.init.normal_(self.down.weight, std=1e-2)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(
        self,
        x: torch.Tensor,
        summary_present: bool = False,
        bypass_summary: bool = False,
    ) -> torch.Tensor:
        out = x + self.up(F.silu(self.down(self.norm(x))))
        if summary_present and bypass_summary:
            out = torch.cat([x[:1], out[1:]], dim=0)
        return out


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ff1 = FeedForwardModule(cfg.d_model, cfg.ff_hidden)
        self.attention = SelfAttention(cfg.d_model, cfg.num_heads)
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel)
        self.ff2 = FeedForwardModule(cfg.d_model, cfg.ff_hidden)
        self.norm_out = nn.LayerNorm(cfg.d_model)

    def forward(self, x: torch.Tensor, summary_present: bool = False) -> torch.Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attention(x)
        c = self.conv(x, summary_present)
        if summary_present:
            # summary row bypasses the convolution stage entirely
            x = torch.cat([x[:1], x[1:] + c[1:]], dim=0)
        else:
            x = x + c
        return self.norm_out(x + 0.5 * self.ff2(x))


def _stride_pair(factor: int) -> tuple[int, int]:
    if factor < 1:
        raise ValueError("subsample_factor must be >= 1")
    s2 = 2 if factor % 2 == 0 and factor > 1 else 1
    return factor // s2, s2


class ConvSubsampler(nn.Module):
    """Two strided 1-D convs: total stride = factor, features projected to d_model."""

    def __init__(self, num_mels: int, d_model: int, factor: int):
        super().__init__()
        s1, s2 = _stride_pair(factor)
        self.strides = (s1, s2)
        self.conv1 = nn.Conv1d(num_mels, d_model, kernel_size=s1, stride=s1)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel_size=s2, stride=s2)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        t = features.shape[0]
        if t < self.strides[0] * self.strides[1]:
            raise ValueError("input shorter than subsample_factor frames")
        x = features.transpose(0, 1).unsqueeze(0)  # (1, F, T)
        for conv, s in zip((self.conv1, self.conv2), self.strides):
            pad = (-x.shape[-1]) % s
            if pad:
                x = F.pad(x, (0, pad))
            x = conv(x)
            if conv is self.conv1:
                x = F.silu(x)
        return x.squeeze(0).transpose(0, 1)  # (ceil(T/factor), d)


class ConvUpsampler(nn.Module):
    """Transposed convs matching the subsampler strides; output cut to target_T."""

    def __init__(self, d_model: int, factor: int):
        super().__init__()
        s1, s2 = _stride_pair(factor)
        self.deconv1 = nn.ConvTranspose1d(d_model, d_model, kernel_size=s2, stride=s2)
        self.deconv2 = nn.ConvTranspose1d(d_model, d_model, kernel_size=s1, stride=s1)

    def forward(self, x: torch.Tensor, target_t: int) -> torch.Tensor:
        y = x.transpose(0, 1).unsqueeze(0)
        y = F.silu(self.deconv1(y))
        y = self.deconv2(y)
        y = y.squeeze(0).transpose(0, 1)
        if y.shape[0] < target_t:
            raise RuntimeError("upsampled sequence shorter than target")
        return y[:target_t]


class ConformerEncoder(nn.Module):
    """Subsample -> Conformer blocks with per-domain adapters -> upsample."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampler = ConvSubsampler(cfg.num_mels, cfg.d_model, cfg.subsample_factor)
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_blocks))
        self.upsampler = ConvUpsampler(cfg.d_model, cfg.subsample_factor)
        self.adapter_blocks = sorted(cfg.effective_adapter_blocks())
        self.adapters = nn.ModuleDict({
            dom: nn.ModuleDict({
                str(b): Adapter(cfg.d_model, cfg.adapter_bottleneck)
                for b in self.adapter_blocks
            })
            for dom in cfg.domains
        })
        if cfg.use_summary_vector:
            self.summary_vector = nn.Parameter(torch.zeros(cfg.d_model))
            nn.init.normal_(self.summary_vector, std=0.02)
        else:
            self.summary_vector = None

    def forward(self, features: torch.Tensor, domain: Optional[str] = None) -> EncoderOutput:
        """Encode (T, F) features; domain=None skips every adapter."""
        if domain is not None and domain not in self.adapters:
            raise KeyError(
                f"unknown domain {domain!r}; known: {sorted(self.adapters)}")
        target_t = features.shape[0]
        x = self.subsampler(features)
        summary_present = self.summary_vector is not None
        if summary_present:
            x = torch.cat([self.summary_vector.unsqueeze(0), x], dim=0)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, summary_present)
            if domain is not None and i in set(self.adapter_blocks):
                x = self.adapters[domain][str(i)](
                    x, summary_present, self.cfg.summary_bypasses_adapters)
        if summary_present:
            summary, x = x[0], x[1:]
        else:
            summary = None
        return EncoderOutput(self.upsampler(x, target_t), summary)

    def adapter_parameters(self, domain: Optional[str] = None):
        if domain is None:
            return list(self.adapters.parameters())
        return list(self.adapters[domain].parameters())

    def total_adapter_parameters(self) -> int:
        return sum(p.numel() for p in self.adapters.parameters())
