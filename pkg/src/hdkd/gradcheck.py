"""Finite-difference gradient suite at three granularities: ops, blocks, model.

Every case runs in 64-bit.  A case builds a scalar function and the tensors
to perturb; the reported error is the worst relative disagreement between
backprop and central differences over the checked coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks as B
from . import dflt as D
from . import distill as KD
from . import models as M
from . import tensor as T
from .tensor import Tensor

THRESHOLDS = {"ops": 1e-4, "blocks": 1e-3, "model": 1e-3}
SCOPES = tuple(THRESHOLDS)


@dataclass
class CheckResult:
    name: str
    scope: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.scope:6s} {self.name:28s} rel_err={self.error:.3e} " \
               f"(< {self.threshold:g})"


def _leaf(rng, *shape, positive=False) -> Tensor:
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _projector(fn: Callable, inputs, rng) -> Callable:
    """Scalar ``sum(fn(*xs) * W)`` with W fixed, so no output coordinate cancels by symmetry."""
    with T.no_grad():
        probe = fn(*inputs)
    if probe.ndim == 0:
        return fn
    w = Tensor(rng.standard_normal(probe.shape))
    return lambda *xs: T.tsum(fn(*xs) * w)


# -- ops --------------------------------------------------------------------

def _op_cases(rng) -> list:
    """(name, fn, inputs) triples; fn maps the inputs to an output tensor."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 1, 4)
    pos = _leaf(rng, 3, 4, positive=True)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    img = _leaf(rng, 2, 4, 6, 6)
    lin_w, lin_b = _leaf(rng, 5, 4), _leaf(rng, 5)
    bn_g, bn_b = _leaf(rng, 4), _leaf(rng, 4)
    ln_g, ln_b = _leaf(rng, 4), _leaf(rng, 4)
    w_dense, w_group, w_dw, w_pw = _leaf(rng, 6, 4, 3, 3), _leaf(rng, 6, 2, 3, 3), _leaf(rng, 4, 1, 3, 3), \
        _leaf(rng, 8, 4, 1, 1)
    cbias = _leaf(rng, 6)
    labels = rng.integers(0, 4, 3)
    rm, rv = np.zeros(4), np.ones(4)
    return [
        ("add (broadcast)", lambda x, y: x + y, (a, row)),
        ("sub (broadcast)", lambda x, y: x - y, (a, row)),
        ("mul", lambda x, y: x * y, (a, b)),
        ("div", lambda x, y: x / y, (a, pos)),
        ("neg", lambda x: -x, (a,)),
        ("power", lambda x: T.power(x, 3.0), (a,)),
        ("exp", T.exp, (a,)),
        ("log", T.log, (pos,)),
        ("sum (axis)", lambda x: T.tsum(x, axis=1, keepdims=True), (a,)),
        ("mean", lambda x: T.mean(x, axis=0), (a,)),
        ("matmul (batched)", T.matmul, (m1, m2)),
        ("linear", T.linear, (a, lin_w, lin_b)),
        ("reshape", lambda x: T.reshape(x, (4, 3)), (a,)),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), (m1,)),
        ("swapaxes", lambda x: T.swapaxes(x, 0, 1), (a,)),
        ("concat", lambda x, y: T.concat([x, y], axis=0), (a, row)),
        ("slice (basic)", lambda x: x[1:, ::2], (a,)),
        ("slice (gather)", lambda x: x[np.arange(3), labels], (a,)),
        ("broadcast_to", lambda x: T.broadcast_to(x, (3, 4)), (row,)),
        ("gelu", T.gelu, (a,)),
        ("relu", T.relu, (a,)),
        ("sigmoid", T.sigmoid, (a,)),
        ("softmax", lambda x: T.softmax(x, axis=-1), (a,)),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), (a,)),
        ("batch_norm (train)", lambda x, g, h: T.batch_norm(x, g, h, rm.copy(), rv.copy(), True), (img, bn_g, bn_b)),
        ("batch_norm (eval)", lambda x, g, h: T.batch_norm(x, g, h, rm + 0.1, rv * 2, False), (img, bn_g, bn_b)),
        ("layer_norm", T.layer_norm, (a, ln_g, ln_b)),
        ("conv2d dense s1 p1 +bias", lambda x, w, c: T.conv2d(x, w, c, stride=1, padding=1), (img, w_dense, cbias)),
        ("conv2d dense s2", lambda x, w: T.conv2d(x, w, stride=2), (img, w_dense)),
        ("conv2d grouped", lambda x, w: T.conv2d(x, w, stride=1, padding=1, groups=2), (img, w_group)),
        ("conv2d depthwise s1", lambda x, w: T.conv2d(x, w, stride=1, padding=1, groups=4), (img, w_dw)),
        ("conv2d depthwise s2", lambda x, w: T.conv2d(x, w, stride=2, padding=1, groups=4), (img, w_dw)),
        ("conv2d pointwise", T.conv2d, (img, w_pw)),
        ("avgpool global-spatial", lambda x: T.pool(x, "avg", "global-spatial"), (img,)),
        ("maxpool global-spatial", lambda x: T.pool(x, "max", "global-spatial"), (img,)),
        ("avgpool global-channel", lambda x: T.pool(x, "avg", "global-channel"), (img,)),
        ("maxpool global-channel", lambda x: T.pool(x, "max", "global-channel"), (img,)),
        ("avgpool window", lambda x: T.pool(x, "avg", "window", 2, 2), (img,)),
        ("maxpool window", lambda x: T.pool(x, "max", "window", 3, 1), (img,)),
        ("cross_entropy", lambda x: KD.cross_entropy(x, labels), (a,)),
        ("kl_divergence", KD.kl_divergence, (a, b)),
    ]


def op_results(seed: int = 0, max_coords: int | None = None) -> list:
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        out = []
        for name, fn, inputs in _op_cases(rng):
            f = _projector(fn, inputs, rng)
            err = T.grad_check(f, list(inputs), max_coords=max_coords, seed=seed)
            out.append(CheckResult(name, "ops", err, THRESHOLDS["ops"]))
        return out


# -- blocks / model -----------------------------------------------------------

def _module_check(name: str, scope: str, module, x: Tensor, seed: int, max_coords: int,
                  head: Callable | None = None) -> CheckResult:
    params = list(module.parameters())
    if head is None:
        f = _projector(lambda xx, *ps: module(xx), [x] + params, np.random.default_rng([seed, 99]))
    else:
        def f(xx, *ps):
            return head(module(xx))

    err = T.grad_check(f, [x] + params, max_coords=max_coords, seed=seed)
    return CheckResult(name, scope, err, THRESHOLDS[scope])


def block_results(seed: int = 0, max_coords: int = 12) -> list:
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        cases = [
            ("MBCSA stride 1 (residual)", B.mbcsa_block(8, 8, 1, rng, ca_reduction=4), (2, 8, 6, 6)),
            ("MBCSA stride 2", B.mbcsa_block(8, 12, 2, rng, ca_reduction=4), (2, 8, 6, 6)),
            ("MBConv (SE) stride 1", B.mbconv_block(8, 8, 1, rng, ca_reduction=4), (2, 8, 6, 6)),
            ("CBAM", B.CBAM(8, 4, 7, rng), (2, 8, 5, 5)),
            ("stem", B.Stem(B.StemConfig(3, 8, 3, 2), rng), (2, 3, 8, 8)),
        ]
        cfg = D.DfltConfig(layers=1, embed_dim=8, heads=2, head_dim=4)
        cases += [
            ("DFLT layer", D.TransformerLayer(cfg, rng), (2, 5, 8)),
            ("multi-head self-attention", D.MultiHeadSelfAttention(cfg, rng), (2, 5, 8)),
            ("patch embedding", D.PatchEmbed(6, cfg, (4, 4), rng), (2, 6, 4, 4)),
            ("DFLT head", D.DFLT(6, (4, 4), 3, cfg, rng), (2, 6, 4, 4)),
        ]
        out = []
        for name, module, shape in cases:
            x = Tensor(rng.standard_normal(shape), requires_grad=True)
            head = None
            if isinstance(module, D.DFLT):
                wc, wd = (Tensor(rng.standard_normal((shape[0], 3))) for _ in range(2))
                head = lambda o, wc=wc, wd=wd: T.tsum(o[0] * wc) + T.tsum(o[1] * wd)
            out.append(_module_check(name, "blocks", module, x, seed, max_coords, head))
        return out


TOY_TEACHER = M.TeacherSpec(blocks=(2, 2, 2), channels=(4, 8, 8), image_size=16, ca_reduction=4)
TOY_STUDENT = M.StudentSpec(blocks=(1, 1, 1), channels=(4, 8, 8), image_size=16, ca_reduction=4,
                            dflt=D.DfltConfig(layers=1, patch=(1, 1), embed_dim=8, heads=2, head_dim=4))


def model_results(seed: int = 0, max_coords: int = 8, num_classes: int = 3) -> list:
    """Full combined objective through a toy student against a frozen toy teacher."""
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        teacher = M.build_teacher(TOY_TEACHER, num_classes, seed + 1)
        teacher.eval()
        student = M.build_student(TOY_STUDENT.with_distill(True), num_classes, seed)
        M.validate_pair(TOY_TEACHER, student.spec)
        x = Tensor(rng.standard_normal((3, 3, 16, 16)), requires_grad=True)
        y = rng.integers(0, num_classes, 3)
        h = KD.DistillHyper(alpha=0.5, temperature=2.0, lam=10.0, feat_exponent=1.0)
        with T.no_grad():
            t_out = teacher(x.detach())

        def objective(out):
            return KD.combined_loss(out, t_out, y, h)[0]

        res = [_module_check("combined objective (student)", "model", student, x, seed, max_coords, objective)]
        plain = M.build_student(TOY_STUDENT.with_distill(False), num_classes, seed)
        res.append(_module_check("CE objective (plain student)", "model", plain, x, seed, max_coords,
                                 lambda out: KD.cross_entropy(out.cls_logits, y)))
        return res


def run_suite(scope: str = "all", seed: int = 0) -> list:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES + ('all',)}")
    runners = {"ops": op_results, "blocks": block_results, "model": model_results}
    out = []
    for s in SCOPES:
        if scope in (s, "all"):
            out.extend(runners[s](seed=seed))
    return out
