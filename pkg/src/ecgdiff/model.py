"""Two-stream conditional noise estimator.

One stream reads the diffusion latent ``x_t``, the other the noisy
observation. Both are stacks of HNF blocks (multi-scale convolutions with a
half instance norm and a residual shortcut). After every stage a FiLM bridge,
driven by the embedded noise level, maps condition-stream features into the
latent stream. Nothing is resampled, so any input length >= 2 works.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError

# Scale applied to the level before the geometric frequency ladder; levels live
# in (0, 1] so without it the low-frequency half of the embedding is flat.
LEVEL_SCALE = 5000.0
MIN_LENGTH = 2


@dataclass
class ModelConfig:
    channels: int = 64
    blocks: int = 4
    kernel_sizes: tuple = (3, 5, 9, 15)
    embed_dim: int = 64
    input_kernel: int = 3
    fuse_kernel: int = 1
    negative_slope: float = 0.2
    bidirectional: bool = False

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if not self.kernel_sizes:
            raise ConfigError("kernel_sizes must not be empty")
        for k in (*self.kernel_sizes, self.input_kernel, self.fuse_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even and >= 2, got {self.embed_dim}")

    def to_dict(self):
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def sinusoidal_embed(level, dim):
    """Interleaved ``[sin(w0 l), cos(w0 l), sin(w1 l), ...]`` of a scalar level.

    ``w_k = LEVEL_SCALE * 10000 ** (-k / (dim / 2))``. Accepts a float (returns
    ``(dim,)``) or a 1-D tensor of levels (returns ``(N, dim)``), computed in
    float64.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    scalar = not torch.is_tensor(level)
    lv = torch.as_tensor(level, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freqs = LEVEL_SCALE * torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    arg = lv * freqs
    emb = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1).reshape(lv.shape[0], dim)
    return emb[0] if scalar else emb


class HNFBlock(nn.Module):
    def __init__(self, channels, kernel_sizes=(3, 5, 9, 15), fuse_kernel=1, negative_slope=0.2):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"HNF block needs an even channel count, got {channels}")
        self.slope = negative_slope
        self.branches = nn.ModuleList(
            nn.Conv1d(channels, channels, k, padding=k // 2) for k in kernel_sizes
        )
        self.aggregate = nn.Conv1d(channels * len(kernel_sizes), channels, 1)
        self.norm = nn.InstanceNorm1d(channels // 2, affine=True)
        self.fuse = nn.Conv1d(channels, channels, fuse_kernel, padding=fuse_kernel // 2)

    def half_norm(self, h):
        a, b = h.chunk(2, dim=1)
        return torch.cat([self.norm(a), b], dim=1)

    def inner(self, x):
        h = torch.cat([F.leaky_relu(conv(x), self.slope) for conv in self.branches], dim=1)
        h = self.half_norm(self.aggregate(h))
        return self.fuse(F.leaky_relu(h, self.slope))

    def forward(self, x):
        return x + self.inner(x)


class Bridge(nn.Module):
    """FiLM: a 1x1 conv turns the level embedding into per-channel scale/shift."""

    def __init__(self, embed_dim, channels):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv1d(embed_dim, 2 * channels, 1)

    def modulation(self, emb):
        gamma, delta = self.proj(emb.unsqueeze(-1)).chunk(2, dim=1)
        return gamma, delta

    def forward(self, features, emb):
        if features.shape[1] != self.channels or emb.shape[0] != features.shape[0]:
            raise ConfigError(
                f"bridge expects (N, {self.channels}, L) features and N embeddings, "
                f"got {tuple(features.shape)} and {tuple(emb.shape)}"
            )
        gamma, delta = self.modulation(emb)
        return gamma * features + delta


class Denoiser(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        pad = c.input_kernel // 2
        self.in_latent = nn.Conv1d(1, c.channels, c.input_kernel, padding=pad)
        self.in_cond = nn.Conv1d(1, c.channels, c.input_kernel, padding=pad)

        def stack():
            return nn.ModuleList(
                HNFBlock(c.channels, c.kernel_sizes, c.fuse_kernel, c.negative_slope)
                for _ in range(c.blocks)
            )

        self.latent_blocks = stack()
        self.cond_blocks = stack()
        self.bridges = nn.ModuleList(Bridge(c.embed_dim, c.channels) for _ in range(c.blocks))
        if c.bidirectional:
            self.back_bridges = nn.ModuleList(
                Bridge(c.embed_dim, c.channels) for _ in range(c.blocks)
            )
        self.out = nn.Conv1d(c.channels, 1, 1)
        # eps_hat starts at exactly zero
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_t, condition, level):
        squeeze = x_t.dim() == 1
        if squeeze:
            x_t, condition = x_t.unsqueeze(0), condition.unsqueeze(0)
        if x_t.shape != condition.shape:
            raise ValueError(f"length mismatch: {tuple(x_t.shape)} vs {tuple(condition.shape)}")
        if x_t.shape[-1] < MIN_LENGTH:
            raise ValueError(f"inputs must have at least {MIN_LENGTH} samples")
        level = torch.as_tensor(level, dtype=torch.float64).reshape(-1)
        if level.numel() == 1 and x_t.shape[0] > 1:
            level = level.expand(x_t.shape[0])
        emb = sinusoidal_embed(level, self.config.embed_dim).to(x_t.dtype)

        hx = self.in_latent(x_t.unsqueeze(1))
        hc = self.in_cond(condition.unsqueeze(1))
        for i in range(self.config.blocks):
            hx = self.latent_blocks[i](hx)
            hc = self.cond_blocks[i](hc)
            injected = hx + self.bridges[i](hc, emb)
            if self.config.bidirectional:
                hc = hc + self.back_bridges[i](hx, emb)
            hx = injected
        out = self.out(hx).squeeze(1)
        return out.squeeze(0) if squeeze else out


def init_params(config=None, seed=0):
    """Build a Denoiser with weights drawn from a private RNG stream."""
    config = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config or {})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = Denoiser(config)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
