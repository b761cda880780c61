"""Feature-level transformer head: patch tokens over stage-3 features plus CLS/distillation tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class DfltConfig:
    layers: int = 3
    patch: tuple = (2, 2)
    embed_dim: int = 256
    heads: int = 8
    head_dim: int = 32
    mlp_ratio: int = 4
    distill_token: bool = True

    def __post_init__(self):
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(f"heads x head_dim ({self.heads}x{self.head_dim}) != embed_dim {self.embed_dim}")
        if self.layers < 1:
            raise ValueError("need at least one transformer layer")

    @property
    def n_global(self) -> int:
        return 2 if self.distill_token else 1

    def n_patches(self, h: int, w: int) -> int:
        ph, pw = self.patch
        if h % ph or w % pw:
            raise ValueError(f"feature map {h}x{w} not divisible by patch {self.patch}")
        return (h // ph) * (w // pw)

    def n_tokens(self, h: int, w: int) -> int:
        return self.n_patches(h, w) + self.n_global


class PatchEmbed(Module):
    """Non-overlapping patch projection plus global tokens and positional embedding."""

    def __init__(self, in_channels: int, cfg: DfltConfig, feat_hw: tuple, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.feat_hw = tuple(feat_hw)
        ph, pw = cfg.patch
        if ph != pw:
            raise ValueError("only square patches are supported")
        d = cfg.embed_dim
        self.proj = Conv2d(in_channels, d, ph, rng, stride=ph, bias=True)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, d)))
        self.dist_token = Parameter(trunc_normal(rng, (1, 1, d))) if cfg.distill_token else None
        self.pos_embed = Parameter(trunc_normal(rng, (1, cfg.n_tokens(*feat_hw), d)))

    def forward(self, f3: Tensor) -> Tensor:
        B, _, H, W = f3.shape
        if (H, W) != self.feat_hw:
            self.cfg.n_patches(H, W)
            raise ValueError(f"positional embedding built for {self.feat_hw}, got {(H, W)}")
        p = self.proj(f3)
        d, n = p.shape[1], p.shape[2] * p.shape[3]
        patches = p.reshape(B, d, n).transpose(0, 2, 1)
        glob = [T.broadcast_to(self.cls_token, (B, 1, d))]
        if self.dist_token is not None:
            glob.append(T.broadcast_to(self.dist_token, (B, 1, d)))
        return T.concat(glob + [patches], axis=1) + self.pos_embed


class MultiHeadSelfAttention(Module):
    def __init__(self, cfg: DfltConfig, rng: np.random.Generator):
        super().__init__()
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.qkv = Linear(cfg.embed_dim, 3 * cfg.embed_dim, rng)
        self.proj = Linear(cfg.embed_dim, cfg.embed_dim, rng)
        self.record = False
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        B, N, d = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        if self.record:
            self.last_attention = attn.data.copy()
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
        return self.proj(out)


class TransformerMLP(Module):
    """LN -> expand d->r*d -> GELU -> project r*d->d, applied per token."""

    def __init__(self, cfg: DfltConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.norm(x))))


class TransformerLayer(Module):
    def __init__(self, cfg: DfltConfig, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg, rng)
        self.mlp = TransformerMLP(cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm(x))
        return x + self.mlp(x)


class DFLT(Module):
    """Patch embedding, pre-norm transformer layers, final LN and the two linear heads."""

    def __init__(self, in_channels: int, feat_hw: tuple, num_classes: int, cfg: DfltConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(in_channels, cfg, feat_hw, rng)
        self.layers = ModuleList(TransformerLayer(cfg, rng) for _ in range(cfg.layers))
        self.norm = LayerNorm(cfg.embed_dim)
        self.head_cls = Linear(cfg.embed_dim, num_classes, rng)
        self.head_distill = Linear(cfg.embed_dim, num_classes, rng) if cfg.distill_token else None

    def tokens(self, f3: Tensor) -> Tensor:
        x = self.embed(f3)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)

    def forward(self, f3: Tensor):
        """Returns ``(cls_logits, distill_logits)``; the latter is None without a distillation token."""
        x = self.tokens(f3)
        cls_logits = self.head_cls(x[:, 0])
        distill_logits = self.head_distill(x[:, 1]) if self.head_distill is not None else None
        return cls_logits, distill_logits

    def set_record_attention(self, on: bool = True) -> None:
        for layer in self.layers:
            layer.attn.record = on

    def attention_maps(self) -> list:
        return [layer.attn.last_attention for layer in self.layers]
