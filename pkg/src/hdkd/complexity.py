"""Parameter and FLOP accounting by walking the module tree.

Each module type has a registered counter mapping an input shape (batch
item, no batch axis) to an output shape and a :class:`Cost`.  Unregistered
types raise :class:`AnalyzerError`.

A cost has two parts: ``macs`` (multiply-accumulates in conv, linear and
attention matmuls) and ``elem`` (elementwise work, counted at 2 ops per
element for normalizations and activations, 1 for adds/multiplies/pool
reads).  Under the ``"2mac"`` convention FLOPs = 2*macs + elem; under
``"mac"`` everything is expressed in multiply-accumulate units, so FLOPs =
macs + elem/2, exactly half of the ``"2mac"`` figure.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from . import blocks as B
from . import dflt as D
from . import models as M
from . import nn
from .tensor import conv_out_extent

CONVENTIONS = ("mac", "2mac")
REFERENCE_TEACHER_GFLOPS = 5.88


class AnalyzerError(TypeError):
    pass


@dataclass
class Cost:
    macs: int = 0
    elem: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.macs + other.macs, self.elem + other.elem)

    def flops(self, convention: str = "mac") -> float:
        if convention == "2mac":
            return 2 * self.macs + self.elem
        if convention == "mac":
            return self.macs + self.elem / 2
        raise ValueError(f"unknown convention {convention!r}")


_COUNTERS = {}


def counter(cls):
    def register(fn):
        _COUNTERS[cls] = fn
        return fn
    return register


def analyze(module, shape) -> tuple:
    """Return ``(out_shape, Cost)`` for one batch item of ``shape``."""
    fn = _COUNTERS.get(type(module))
    if fn is None:
        raise AnalyzerError(f"no complexity counter for layer type {type(module).__name__}")
    return fn(module, tuple(shape))


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


@counter(nn.Conv2d)
def _conv(m: nn.Conv2d, shape):
    c, h, w = shape
    ho, wo = conv_out_extent(h, m.kernel, m.stride, m.padding), conv_out_extent(w, m.kernel, m.stride, m.padding)
    macs = m.kernel * m.kernel * (m.in_ch // m.groups) * m.out_ch * ho * wo
    elem = m.out_ch * ho * wo if m.bias is not None else 0
    return (m.out_ch, ho, wo), Cost(macs, elem)


@counter(nn.Linear)
def _linear(m: nn.Linear, shape):
    rows = _numel(shape[:-1])
    elem = rows * m.out_features if m.bias is not None else 0
    return shape[:-1] + (m.out_features,), Cost(rows * m.in_features * m.out_features, elem)


@counter(nn.BatchNorm2d)
@counter(nn.LayerNorm)
def _norm(m, shape):
    return shape, Cost(0, 2 * _numel(shape))


def _act(shape) -> Cost:
    return Cost(0, 2 * _numel(shape))


@counter(B.Stem)
def _stem(m: B.Stem, shape):
    shape, cost = analyze(m.conv, shape)
    _, c2 = analyze(m.bn, shape)
    return shape, cost + c2 + _act(shape)


@counter(B.ChannelAttention)
def _ca(m: B.ChannelAttention, shape):
    c, h, w = shape
    cost = Cost(0, 2 * c * h * w)  # avg + max pooling reads
    for _ in range(2):  # shared MLP runs on both pooled vectors
        s, c1 = analyze(m.shrink, (c,))
        _, c2 = analyze(m.expand, s)
        cost = cost + c1 + c2 + _act(s)
    return (c, 1, 1), cost + Cost(0, c) + _act((c,))


@counter(B.SpatialAttention)
def _sa(m: B.SpatialAttention, shape):
    c, h, w = shape
    out, cost = analyze(m.conv, (2, h, w))
    return out, cost + Cost(0, 2 * c * h * w) + _act(out)


@counter(B.CBAM)
def _cbam(m: B.CBAM, shape):
    _, c1 = analyze(m.ca, shape)
    _, c2 = analyze(m.sa, shape)
    return shape, c1 + c2 + Cost(0, 2 * _numel(shape))


@counter(B.SqueezeExcite)
def _se(m: B.SqueezeExcite, shape):
    c = shape[0]
    s, c1 = analyze(m.shrink, (c,))
    _, c2 = analyze(m.expand, s)
    return shape, c1 + c2 + Cost(0, _numel(shape)) + _act(s) + _act((c,)) + Cost(0, _numel(shape))


@counter(B.MBBlock)
def _mb(m: B.MBBlock, shape):
    total = Cost()
    s = shape
    for layer, gelu_after in ((m.expand, False), (m.bn1, True), (m.dw, False), (m.bn2, True)):
        s, c = analyze(layer, s)
        total = total + c
        if gelu_after:
            total = total + _act(s)
    s, c = analyze(m.attn, s)
    total = total + c
    s, c = analyze(m.project, s)
    total = total + c
    s, c = analyze(m.bn3, s)
    total = total + c
    if m.cfg.residual:
        total = total + Cost(0, _numel(s))
    return s, total


@counter(nn.ModuleList)
def _seq(m: nn.ModuleList, shape):
    total = Cost()
    for child in m:
        shape, c = analyze(child, shape)
        total = total + c
    return shape, total


@counter(D.PatchEmbed)
def _patch(m: D.PatchEmbed, shape):
    (d, h, w), cost = analyze(m.proj, shape)
    n = h * w + m.cfg.n_global
    return (n, d), cost + Cost(0, n * d)


@counter(D.MultiHeadSelfAttention)
def _mhsa(m: D.MultiHeadSelfAttention, shape):
    n, d = shape
    _, cost = analyze(m.qkv, shape)
    hd = m.heads * m.head_dim
    cost = cost + Cost(2 * n * n * hd, m.heads * n * n)  # QK^T and attn @ V; score scaling
    cost = cost + _act((m.heads, n, n))  # softmax
    _, c = analyze(m.proj, shape)
    return shape, cost + c


@counter(D.TransformerMLP)
def _tmlp(m: D.TransformerMLP, shape):
    _, c0 = analyze(m.norm, shape)
    s, c1 = analyze(m.fc1, shape)
    _, c2 = analyze(m.fc2, s)
    return shape, c0 + c1 + c2 + _act(s)


@counter(D.TransformerLayer)
def _tlayer(m: D.TransformerLayer, shape):
    _, c0 = analyze(m.norm, shape)
    _, c1 = analyze(m.attn, shape)
    _, c2 = analyze(m.mlp, shape)
    return shape, c0 + c1 + c2 + Cost(0, 2 * _numel(shape))


@counter(D.DFLT)
def _dflt(m: D.DFLT, shape):
    s, cost = analyze(m.embed, shape)
    s, c = analyze(m.layers, s)
    cost = cost + c
    _, c = analyze(m.norm, s)
    cost = cost + c
    d = s[-1]
    _, c = analyze(m.head_cls, (d,))
    cost = cost + c
    if m.head_distill is not None:
        _, c = analyze(m.head_distill, (d,))
        cost = cost + c
    return (m.head_cls.out_features,), cost


def stage_costs(model, input_shape) -> "OrderedDict[str, Cost]":
    """Per-stage costs; keys are stem, stage1..3 and head (teacher) or dflt (student)."""
    if type(model) not in (M.Teacher, M.Student):
        raise AnalyzerError(f"no complexity counter for model type {type(model).__name__}")
    shape = tuple(input_shape[-3:])
    out = OrderedDict()
    shape, out["stem"] = analyze(model.stem, shape)
    for i, stage in enumerate(model.stages, 1):
        shape, out[f"stage{i}"] = analyze(stage, shape)
    if isinstance(model, M.Teacher):
        c, h, w = shape
        _, head = analyze(model.head, (c,))
        out["head"] = head + Cost(0, c * h * w)
    else:
        _, out["dflt"] = analyze(model.dflt, shape)
    return out


def count_flops(model, input_shape, convention: str = "mac") -> int:
    """FLOPs of one forward pass for a single batch item."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    total = sum(stage_costs(model, input_shape).values(), Cost())
    return int(round(total.flops(convention)))


def count_params(model) -> int:
    return nn.count_parameters(model)


def param_breakdown(model) -> "OrderedDict[str, int]":
    out = OrderedDict()
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        if top == "stages":
            top = f"stage{int(name.split('.')[1]) + 1}"
        out[top] = out.get(top, 0) + p.size
    return out


def distill_token_delta(spec_hdkd: "M.StudentSpec", num_classes: int) -> "OrderedDict[str, int]":
    """Analytic parameter cost of the distillation token: token, its position slot and head."""
    d = spec_hdkd.dflt.embed_dim
    return OrderedDict(dist_token=d, pos_embed_slot=d, head_distill=d * num_classes + num_classes)


def calibrate_convention(teacher, input_shape, target_gflops: float = REFERENCE_TEACHER_GFLOPS) -> str:
    """Pick the convention whose teacher count lands nearest the published figure."""
    return min(CONVENTIONS, key=lambda c: abs(count_flops(teacher, input_shape, c) / 1e9 - target_gflops))
