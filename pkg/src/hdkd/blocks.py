"""Stem, squeeze-excitation, CBAM and the inverted-residual blocks (MBConv / MBCSA)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

ATTENTIONS = ("CBAM", "SE")


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion: int = 4
    attention: str = "CBAM"
    ca_reduction: int = 32
    sa_kernel: int = 7

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}, got {self.attention!r}")
        if self.hidden_channels % self.ca_reduction:
            raise ValueError(f"ca_reduction {self.ca_reduction} does not divide {self.hidden_channels}")
        if self.sa_kernel % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")

    @property
    def hidden_channels(self) -> int:
        return self.in_channels * self.expansion

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class StemConfig:
    in_channels: int = 3
    out_channels: int = 64
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("stem kernel must be odd")
        if self.stride not in (2, 4):
            raise ValueError(f"stem stride must be 2 or 4, got {self.stride}")


class Stem(Module):
    """conv k x k (stride, pad k//2) -> BN -> GELU."""

    def __init__(self, cfg: StemConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.conv = Conv2d(cfg.in_channels, cfg.out_channels, cfg.kernel, rng, stride=cfg.stride,
                           padding=cfg.kernel // 2)
        self.bn = BatchNorm2d(cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        if H % self.cfg.stride or W % self.cfg.stride:
            raise ValueError(f"input {H}x{W} not divisible by stem stride {self.cfg.stride}")
        return T.gelu(self.bn(self.conv(x)))


class ChannelAttention(Module):
    """sigmoid(MLP(avgpool F) + MLP(maxpool F)) with one shared MLP."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.channels, self.reduction = channels, reduction
        self.shrink = Linear(channels, channels // reduction, rng)
        self.expand = Linear(channels // reduction, channels, rng)

    def mlp(self, v: Tensor) -> Tensor:
        return self.expand(T.gelu(self.shrink(v)))

    def forward(self, f: Tensor) -> Tensor:
        B, C = f.shape[:2]
        avg = T.pool(f, "avg", "global-spatial").reshape(B, C)
        mx = T.pool(f, "max", "global-spatial").reshape(B, C)
        return T.sigmoid(self.mlp(avg) + self.mlp(mx)).reshape(B, C, 1, 1)


class SpatialAttention(Module):
    """sigmoid(conv k x k over [channel-avg, channel-max])."""

    def __init__(self, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2, bias=True)

    def forward(self, f: Tensor) -> Tensor:
        pooled = T.concat([T.pool(f, "avg", "global-channel"), T.pool(f, "max", "global-channel")], axis=1)
        return T.sigmoid(self.conv(pooled))


class CBAM(Module):
    def __init__(self, channels: int, reduction: int, sa_kernel: int, rng: np.random.Generator):
        super().__init__()
        self.ca = ChannelAttention(channels, reduction, rng)
        self.sa = SpatialAttention(sa_kernel, rng)

    def forward(self, f: Tensor) -> Tensor:
        f1 = self.ca(f) * f
        return self.sa(f1) * f1


class SqueezeExcite(Module):
    """Channel gating from the spatial average; ReLU inside the MLP."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.shrink = Linear(channels, channels // reduction, rng)
        self.expand = Linear(channels // reduction, channels, rng)

    def forward(self, f: Tensor) -> Tensor:
        B, C = f.shape[:2]
        s = T.pool(f, "avg", "global-spatial").reshape(B, C)
        gate = T.sigmoid(self.expand(T.relu(self.shrink(s)))).reshape(B, C, 1, 1)
        return gate * f


class MBBlock(Module):
    """Inverted residual block.

    1x1 expand -> BN -> GELU -> 3x3 depthwise (stride) -> BN -> GELU ->
    attention -> 1x1 project -> BN, plus identity shortcut when shapes allow.
    ``attention="CBAM"`` gives the MBCSA block, ``"SE"`` the classic MBConv.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        hid = cfg.hidden_channels
        self.expand = Conv2d(cfg.in_channels, hid, 1, rng)
        self.bn1 = BatchNorm2d(hid)
        self.dw = Conv2d(hid, hid, 3, rng, stride=cfg.stride, padding=1, groups=hid)
        self.bn2 = BatchNorm2d(hid)
        if cfg.attention == "CBAM":
            self.attn = CBAM(hid, cfg.ca_reduction, cfg.sa_kernel, rng)
        else:
            self.attn = SqueezeExcite(hid, cfg.ca_reduction, rng)
        self.project = Conv2d(hid, cfg.out_channels, 1, rng)
        self.bn3 = BatchNorm2d(cfg.out_channels)

    def core(self, x: Tensor) -> Tensor:
        h = T.gelu(self.bn1(self.expand(x)))
        h = T.gelu(self.bn2(self.dw(h)))
        h = self.attn(h)
        return self.bn3(self.project(h))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"block expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        out = self.core(x)
        return out + x if self.cfg.residual else out


def mbcsa_block(in_channels: int, out_channels: int, stride: int, rng: np.random.Generator, **kw) -> MBBlock:
    return MBBlock(BlockConfig(in_channels, out_channels, stride, attention="CBAM", **kw), rng)


def mbconv_block(in_channels: int, out_channels: int, stride: int, rng: np.random.Generator, **kw) -> MBBlock:
    return MBBlock(BlockConfig(in_channels, out_channels, stride, attention="SE", **kw), rng)
