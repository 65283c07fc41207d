"""Text-conditioned denoising UNet with enumerated feature insertion points.

The network runs at latent resolution (4 x 16 x 16 by default) over three
levels (16 -> 8 -> 4). Insertion points are the places where an auxiliary
branch may add features to the activation stream:

    index  location                     shape (default config)
    0..1   down level 0 block outputs  (32, 16, 16)
    2      downsample 0 output         (32, 8, 8)
    3..4   down level 1 block outputs  (64, 8, 8)
    5      downsample 1 output         (64, 4, 4)
    6..7   down level 2 block outputs  (128, 4, 4)
    8      mid block output            (128, 4, 4)
    9..10  up level 2 block outputs    (128, 4, 4)
    11..12 up level 1 block outputs    (64, 8, 8)

Injected features are added *before* subsequent layers (and the skip stack)
consume the activation, so injection at a down point also propagates through
the corresponding skip connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import ShapeError

Tensor = torch.Tensor


@dataclass(frozen=True)
class InsertionPoint:
    index: int
    location: str  # e.g. "down0.block1", "down0.ds", "mid", "up2.block0"
    channels: int
    resolution: int
    stage: str  # "down" | "mid" | "up"


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 16
    channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    attn_levels: tuple[int, ...] = (1, 2)  # levels at resolutions 8 and 4
    text_dim: int = 64
    text_len: int = 8
    time_dim: int = 128
    heads: int = 4
    in_channels: int = 4

    def insertion_points(self) -> list[InsertionPoint]:
        points: list[InsertionPoint] = []
        res = self.latent_size
        idx = 0
        for lvl, ch in enumerate(self.channels):
            for b in range(self.blocks_per_level):
                points.append(InsertionPoint(idx, f"down{lvl}.block{b}", ch, res, "down"))
                idx += 1
            if lvl < len(self.channels) - 1:
                res //= 2
                points.append(InsertionPoint(idx, f"down{lvl}.ds", ch, res, "down"))
                idx += 1
        ch = self.channels[-1]
        points.append(InsertionPoint(idx, "mid", ch, res, "mid"))
        idx += 1
        # up-path insertion points cover the coarsest two levels only
        for lvl in range(len(self.channels) - 1, 0, -1):
            ch = self.channels[lvl]
            for b in range(self.blocks_per_level):
                points.append(InsertionPoint(idx, f"up{lvl}.block{b}", ch, res, "up"))
                idx += 1
            res *= 2
        return points

    @property
    def n_insertion_points(self) -> int:
        return len(self.insertion_points())

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "latent_size": self.latent_size,
            "channels": list(self.channels),
            "blocks_per_level": self.blocks_per_level,
            "attn_levels": list(self.attn_levels),
            "text_dim": self.text_dim,
            "text_len": self.text_len,
            "time_dim": self.time_dim,
            "heads": self.heads,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            latent_channels=d["latent_channels"],
            latent_size=d["latent_size"],
            channels=tuple(d["channels"]),
            blocks_per_level=d["blocks_per_level"],
            attn_levels=tuple(d["attn_levels"]),
            text_dim=d["text_dim"],
            text_len=d["text_len"],
            time_dim=d["time_dim"],
            heads=d["heads"],
            in_channels=d["in_channels"],
        )


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of the integer step index, (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    ).to(t.device)
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(t.device)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.shortcut(x)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv.unbind(1)
        attn = torch.softmax(
            q.transpose(-1, -2) @ k / math.sqrt(c // self.heads), dim=-1
        )
        out = (v @ attn.transpose(-1, -2)).reshape(b, c, h, w)
        return x + self.proj(out)


class CrossAttention2d(nn.Module):
    """Queries from image tokens, keys/values from the text sequence."""

    def __init__(self, channels: int, text_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(text_dim, channels)
        self.v = nn.Linear(text_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        b, c, h, w = x.shape
        hd = c // self.heads
        q = self.q(self.norm(x)).reshape(b, self.heads, hd, h * w).transpose(-1, -2)
        k = self.k(ctx).reshape(b, -1, self.heads, hd).permute(0, 2, 1, 3)
        v = self.v(ctx).reshape(b, -1, self.heads, hd).permute(0, 2, 1, 3)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class UnitBlock(nn.Module):
    """ResBlock optionally followed by self- and cross-attention; the unit
    output is what skips and insertion points see."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        time_dim: int,
        attn: bool,
        cross: bool,
        text_dim: int,
        heads: int,
    ):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.self_attn = SelfAttention2d(out_ch, heads) if attn else None
        self.cross_attn = CrossAttention2d(out_ch, text_dim, heads) if attn and cross else None

    def forward(self, x: Tensor, temb: Tensor, ctx: Optional[Tensor]) -> Tensor:
        h = self.res(x, temb)
        if self.self_attn is not None:
            h = self.self_attn(h)
        if self.cross_attn is not None:
            h = self.cross_attn(h, ctx)
        return h


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


FeatureSet = list  # list[Tensor | None] of length n_insertion_points


class UNet(nn.Module):
    """Denoiser with capture/injection at the enumerated insertion points.

    ``cross_attention=False`` builds the same network without any
    cross-attention parameters (used by the masked-image branch).
    ``encoder_only=True`` keeps just conv_in, the down path, and the mid
    block (used by the ControlNet-style ablation).
    """

    def __init__(
        self,
        config: DenoiserConfig = DenoiserConfig(),
        cross_attention: bool = True,
        encoder_only: bool = False,
    ):
        super().__init__()
        self.config = config
        self.cross_attention = cross_attention
        self.encoder_only = encoder_only
        cfg = config
        ch = cfg.channels
        td = cfg.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        def unit(in_c, out_c, lvl):
            return UnitBlock(
                in_c, out_c, td, lvl in cfg.attn_levels, cross_attention,
                cfg.text_dim, cfg.heads,
            )

        self.down = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = ch[0]
        for lvl, c in enumerate(ch):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(unit(prev, c, lvl))
                prev = c
            self.down.append(blocks)
            if lvl < len(ch) - 1:
                self.downsamples.append(Downsample(c))

        self.mid1 = unit(ch[-1], ch[-1], len(ch) - 1)
        self.mid2 = ResBlock(ch[-1], ch[-1], td)

        if not encoder_only:
            self.up = nn.ModuleList()
            self.upsamples = nn.ModuleList()
            prev = ch[-1]
            for lvl in range(len(ch) - 1, -1, -1):
                c = ch[lvl]
                blocks = nn.ModuleList()
                for _ in range(cfg.blocks_per_level):
                    blocks.append(unit(prev + c, c, lvl))
                    prev = c
                self.up.append(blocks)
                if lvl > 0:
                    self.upsamples.append(Upsample(c, ch[lvl - 1]))
                    prev = ch[lvl - 1]
            self.norm_out = nn.GroupNorm(8, ch[0])
            self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    @property
    def n_points(self) -> int:
        return self.config.n_insertion_points

    def _run(
        self,
        z: Tensor,
        t: Tensor,
        ctx: Optional[Tensor],
        injected: Optional[Sequence[Optional[Tensor]]] = None,
        w: float = 1.0,
        capture: bool = False,
    ) -> tuple[Tensor, Optional[list[Tensor]]]:
        """Batched forward. Returns (eps, features or None).

        ``injected[i]`` (when given and non-None) is added, scaled by w, to
        the activation at point i. Captured features are post-injection.
        """
        cfg = self.config
        feats: list[Tensor] = []

        def point(h: Tensor) -> Tensor:
            i = len(feats)
            if injected is not None and w != 0.0 and injected[i] is not None:
                h = h + w * injected[i]
            feats.append(h)
            return h

        temb = self.time_mlp(timestep_embedding(t, cfg.time_dim))
        h = self.conv_in(z)
        skips: list[Tensor] = []
        for lvl, blocks in enumerate(self.down):
            for block in blocks:
                h = point(block(h, temb, ctx))
                skips.append(h)
            if lvl < len(self.down) - 1:
                h = point(self.downsamples[lvl](h))

        h = self.mid1(h, temb, ctx)
        h = point(self.mid2(h, temb))

        if self.encoder_only:
            return h, feats if capture else None

        n_levels = len(cfg.channels)
        for i, blocks in enumerate(self.up):
            lvl = n_levels - 1 - i
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), temb, ctx)
                if lvl > 0:
                    h = point(h)
            if lvl > 0:
                h = self.upsamples[i](h)

        eps = self.conv_out(self.act(self.norm_out(h)))
        return eps, feats if capture else None

    # -- single-sample public surface ------------------------------------

    def _check_input(self, z: Tensor) -> None:
        cfg = self.config
        want = (cfg.in_channels, cfg.latent_size, cfg.latent_size)
        if tuple(z.shape) != want:
            raise ShapeError(f"expected latent of shape {want}, got {tuple(z.shape)}")

    def forward_features(
        self, z: Tensor, t: int, cond: Tensor
    ) -> tuple[Tensor, list[Tensor]]:
        """Noise prediction plus the activations at all insertion points."""
        self._check_input(z)
        tb = torch.tensor([t], dtype=torch.long)
        eps, feats = self._run(z[None], tb, cond[None], capture=True)
        return eps[0], [f[0] for f in feats]

    def forward_injected(
        self,
        z: Tensor,
        t: int,
        cond: Tensor,
        injected: Sequence[Optional[Tensor]],
        w: float,
    ) -> Tensor:
        """Noise prediction with per-point features added, scaled by w."""
        self._check_input(z)
        if len(injected) != self.n_points:
            raise ShapeError(
                f"expected {self.n_points} injected features, got {len(injected)}"
            )
        points = self.config.insertion_points()
        batched: list[Optional[Tensor]] = []
        for p, f in zip(points, injected):
            if f is None:
                batched.append(None)
                continue
            if tuple(f.shape) != (p.channels, p.resolution, p.resolution):
                raise ShapeError(
                    f"injected feature {p.index} has shape {tuple(f.shape)}, "
                    f"expected ({p.channels}, {p.resolution}, {p.resolution})"
                )
            batched.append(f[None])
        tb = torch.tensor([t], dtype=torch.long)
        eps, _ = self._run(z[None], tb, cond[None], injected=batched, w=w)
        return eps[0]
