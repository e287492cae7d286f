"""
Dilated attention network: skip-block encoder with spatial attention on the
two low-level stages, channel attention on the three high-level stages, an
atrous block at the bottleneck and a mirrored transposed-conv decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class NetworkConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    num_classes: int = 4
    encoder_channels: Tuple[int, ...] = (32, 64, 128, 256, 256)
    sa_kernel: int = 3
    atrous_rates: Tuple[int, ...] = (1, 2, 3, 4)
    ca_reduction: int = 4
    negative_slope: float = 0.01
    gated_skips: bool = True
    atrous_all_high: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        if len(self.encoder_channels) != 5:
            raise NetworkConfigError("encoder_channels needs exactly 5 stages")
        if any(c <= 0 for c in self.encoder_channels) or self.in_channels <= 0:
            raise NetworkConfigError("channel counts must be positive")
        if self.num_classes < 2:
            raise NetworkConfigError("num_classes must be >= 2")
        rates = self.atrous_rates
        if not rates or any(r <= 0 for r in rates) or len(set(rates)) != len(rates):
            raise NetworkConfigError(f"atrous_rates must be nonempty, positive, distinct: {rates}")
        if self.sa_kernel % 2 == 0 or self.sa_kernel < 1:
            raise NetworkConfigError(f"sa_kernel must be odd, got {self.sa_kernel}")
        for c in self.encoder_channels[2:]:
            if c < self.ca_reduction:
                raise NetworkConfigError(
                    f"channel count {c} smaller than CA reduction ratio {self.ca_reduction}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["atrous_rates"] = list(self.atrous_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class InstanceNorm3d(nn.InstanceNorm3d):
    """Affine instance norm that tolerates a single spatial element (output = bias)."""

    def __init__(self, channels):
        super().__init__(channels, affine=True)

    def forward(self, x):
        if x[0, 0].numel() == 1:
            centred = x - x.mean(dim=(2, 3, 4), keepdim=True)
            return centred * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)
        return super().forward(x)


def conv_norm_act(in_ch, out_ch, slope, kernel_size=3, stride=1, padding=1, dilation=1):
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, dilation=dilation),
        InstanceNorm3d(out_ch),
        nn.LeakyReLU(slope),
    )


class SkipBlock(nn.Module):
    """Two 3x3x3 conv-norm-act layers plus an identity or 1x1x1 projected residual."""

    def __init__(self, in_ch, out_ch, slope=0.01):
        super().__init__()
        self.body = nn.Sequential(
            conv_norm_act(in_ch, out_ch, slope),
            conv_norm_act(out_ch, out_ch, slope),
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.skip(x) + self.body(x)


def _sa_kernels(k):
    return (
        ((1, k, k), (k, 1, 1)),
        ((k, 1, k), (1, k, 1)),
        ((k, k, 1), (1, 1, k)),
    )


class SpatialAttention(nn.Module):
    """Single-channel spatial gate from three factorized convolution pairs."""

    def __init__(self, channels, kernel=3):
        super().__init__()
        if kernel % 2 == 0:
            raise NetworkConfigError(f"spatial attention kernel must be odd, got {kernel}")
        self.branches = nn.ModuleList()
        for k1, k2 in _sa_kernels(kernel):
            self.branches.append(nn.Sequential(
                nn.Conv3d(channels, 1, k1, padding=tuple(k // 2 for k in k1)),
                nn.Conv3d(1, 1, k2, padding=tuple(k // 2 for k in k2)),
            ))

    def gate(self, x):
        return torch.sigmoid(sum(branch(x) for branch in self.branches))

    def forward(self, x):
        return self.gate(x) * x


class ChannelAttention(nn.Module):
    """Squeeze-excitation style per-channel gate (pool, FC, ReLU, FC, sigmoid)."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels < reduction:
            raise NetworkConfigError(f"{channels} channels < reduction ratio {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        pooled = x.mean(dim=(2, 3, 4))
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        return g.view(*g.shape, 1, 1, 1)

    def forward(self, x):
        return self.gate(x) * x


class AtrousBlock(nn.Module):
    """Parallel dilated 3x3x3 branches, concatenated, fused by 1x1x1 conv, then channel attention."""

    def __init__(self, channels, rates=(1, 2, 3, 4), reduction=4, slope=0.01):
        super().__init__()
        branch_ch = max(1, channels // len(rates))
        self.branches = nn.ModuleList(
            conv_norm_act(channels, branch_ch, slope, padding=r, dilation=r) for r in rates
        )
        self.fuse = nn.Conv3d(branch_ch * len(rates), channels, 1)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        feats = torch.cat([b(x) for b in self.branches], dim=1)
        return self.attention(self.fuse(feats))


class DAMNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        slope = cfg.negative_slope

        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for i, c in enumerate(ch):
            self.encoder.append(SkipBlock(prev, c, slope))
            if i < len(ch) - 1:
                self.down.append(conv_norm_act(c, c, slope, stride=2))
            prev = c

        self.attention = nn.ModuleList()
        for i, c in enumerate(ch):
            if i < 2:
                self.attention.append(SpatialAttention(c, cfg.sa_kernel))
            elif i == 4 or cfg.atrous_all_high:
                self.attention.append(AtrousBlock(c, cfg.atrous_rates, cfg.ca_reduction, slope))
            else:
                self.attention.append(ChannelAttention(c, cfg.ca_reduction))

        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in range(3, -1, -1):
            self.up.append(nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2))
            self.decoder.append(SkipBlock(2 * ch[i], ch[i], slope))
        self.head = nn.Conv3d(ch[0], cfg.num_classes, 1)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input (batch, {self.cfg.in_channels}, H, W, D), got {tuple(x.shape)}"
            )
        if any(s % 16 for s in x.shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by 16 (four downsamplings)"
            )
        skips = []
        for i, (block, att) in enumerate(zip(self.encoder, self.attention)):
            raw = block(x)
            x = att(raw)
            if i < 4:
                skips.append(x if self.cfg.gated_skips else raw)
                x = self.down[i](x)
        for up, dec, skip in zip(self.up, self.decoder, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def build_model(cfg: NetworkConfig = NetworkConfig(), seed: int = 0) -> DAMNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DAMNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
