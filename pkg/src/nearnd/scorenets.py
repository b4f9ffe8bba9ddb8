"""Desk-scale score networks s(x, t).

Both nets output a tensor shaped like the input. When built with a schedule,
the raw network output is divided by the marginal std(t), so the network only
has to predict the O(1) noise direction while the returned value is still the
score itself.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding of t followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("embedding dim must be even")
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
        ang = t[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return self.net(emb)


class MLPScoreNet(nn.Module):
    """Score network for flat vectors (N, dim)."""

    def __init__(self, dim: int, hidden: int = 128, depth: int = 3, time_dim: int = 64, schedule=None):
        super().__init__()
        self.dim = dim
        self.schedule = schedule
        self.time_embed = TimeEmbedding(time_dim)
        self.in_proj = nn.Linear(dim + time_dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden)) for _ in range(depth)
        )
        self.out_proj = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.in_proj(torch.cat([x, self.time_embed(t)], dim=-1))
        for block in self.blocks:
            h = h + block(h)
        out = self.out_proj(torch.nn.functional.silu(h))
        if self.schedule is not None:
            out = out / self.schedule.marginal_std(t)[:, None]
        return out

    def arch_config(self) -> dict:
        return {
            "kind": "mlp",
            "dim": self.dim,
            "hidden": self.in_proj.out_features,
            "depth": len(self.blocks),
            "time_dim": self.time_embed.dim,
        }


class _ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, c_out), c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = torch.nn.functional.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class UNetScoreNet(nn.Module):
    """Two-level U-Net score network for small images (N, C, H, W).

    H and W must be divisible by 4. Width sets the base channel count.
    """

    def __init__(self, channels: int = 1, width: int = 32, time_dim: int = 64, schedule=None):
        super().__init__()
        self.channels = channels
        self.width = width
        self.schedule = schedule
        self.time_embed = TimeEmbedding(time_dim)
        w = width
        self.stem = nn.Conv2d(channels, w, 3, padding=1)
        self.down1 = _ConvBlock(w, w, time_dim)
        self.pool1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.down2 = _ConvBlock(2 * w, 2 * w, time_dim)
        self.pool2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid = _ConvBlock(2 * w, 2 * w, time_dim)
        self.up2 = nn.ConvTranspose2d(2 * w, 2 * w, 2, stride=2)
        self.dec2 = _ConvBlock(4 * w, 2 * w, time_dim)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _ConvBlock(2 * w, w, time_dim)
        self.out = nn.Conv2d(w, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"image sides must be divisible by 4, got {tuple(x.shape[2:])}")
        temb = self.time_embed(t)
        h0 = self.stem(x)
        h1 = self.down1(h0, temb)
        h2 = self.down2(self.pool1(h1), temb)
        hm = self.mid(self.pool2(h2), temb)
        u2 = self.dec2(torch.cat([self.up2(hm), h2], dim=1), temb)
        u1 = self.dec1(torch.cat([self.up1(u2), h1], dim=1), temb)
        out = self.out(u1)
        if self.schedule is not None:
            out = out / self.schedule.marginal_std(t)[:, None, None, None]
        return out

    def arch_config(self) -> dict:
        return {
            "kind": "unet",
            "channels": self.channels,
            "width": self.width,
            "time_dim": self.time_embed.dim,
        }


def build_score_net(arch: dict, schedule=None, seed: int | None = None) -> nn.Module:
    """Construct a score net from an architecture config dict, optionally seeded."""
    arch = dict(arch)
    kind = arch.pop("kind")
    if seed is not None:
        torch.manual_seed(seed)
    if kind == "mlp":
        return MLPScoreNet(schedule=schedule, **arch)
    if kind == "unet":
        return UNetScoreNet(schedule=schedule, **arch)
    raise ValueError(f"unknown score net kind {kind!r}")
