"""Logit distillation, stage-weighted feature distillation and their combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class DistillHyper:
    """``alpha``/``temperature`` weight the logit term, ``lam`` the feature term.

    ``feat_exponent`` is the power applied to the 1-based stage index when
    weighting per-stage feature losses.
    """

    alpha: float = 0.5
    temperature: float = 1.0
    lam: float = 10.0
    feat_exponent: float = 1.0
    kl_direction: str = "student_teacher"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"unknown KL direction {self.kl_direction!r}")


def _labels(y, n: int, k: int) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y).astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for a batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Batch-mean cross-entropy from log-sum-exp stabilized log-probabilities."""
    n, k = logits.shape
    y = _labels(y, n, k)
    logp = T.log_softmax(logits, axis=-1)
    return -T.mean(logp[np.arange(n), y])


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q))."""
    logp = T.log_softmax(p_logits, axis=-1)
    logq = T.log_softmax(q_logits, axis=-1)
    return T.mean(T.tsum(T.exp(logp) * (logp - logq), axis=-1))


def kd_term(z_s: Tensor, z_t: Tensor, h: DistillHyper) -> Tensor:
    """t^2 * KL between temperature-softened student and teacher distributions."""
    t = h.temperature
    z_t = z_t.detach()
    zs, zt = z_s * (1.0 / t), z_t * (1.0 / t)
    kl = kl_divergence(zs, zt) if h.kl_direction == "student_teacher" else kl_divergence(zt, zs)
    return kl * (t * t)


def classification_loss(z_s: Tensor, z_t: Tensor, y, h: DistillHyper = DistillHyper(),
                        z_s_kd: Tensor | None = None) -> Tensor:
    """(1 - alpha) * CE(z_s, y) + alpha * t^2 * KL.

    ``z_s_kd`` optionally supplies separate student logits for the KL term
    (the distillation-token logits); by default ``z_s`` feeds both terms.
    """
    if z_s.shape != z_t.shape:
        raise ValueError(f"student logits {z_s.shape} and teacher logits {z_t.shape} differ")
    ce = cross_entropy(z_s, y)
    kd = kd_term(z_s if z_s_kd is None else z_s_kd, z_t, h)
    return ce * (1.0 - h.alpha) + kd * h.alpha


def stage_feature_losses(taps_t, taps_s) -> list:
    """Per-stage (1/(H*W*C)) * ||psi_T - psi_S||^2, batch-averaged; teacher taps are detached."""
    if len(taps_t) != len(taps_s):
        raise ValueError(f"teacher has {len(taps_t)} taps, student {len(taps_s)}")
    out = []
    for j, (ft, fs) in enumerate(zip(taps_t, taps_s), 1):
        if ft.shape != fs.shape:
            raise ValueError(f"stage {j}: teacher tap {ft.shape} vs student tap {fs.shape}")
        diff = fs - ft.detach()
        per_item = int(np.prod(fs.shape[1:]))
        out.append(T.tsum(diff * diff) * (1.0 / (per_item * fs.shape[0])))
    return out


def feature_loss(taps_t, taps_s, h: DistillHyper = DistillHyper(), stages=None) -> Tensor:
    """Sum over stages of per-stage normalized squared error times ``j ** feat_exponent``.

    ``stages`` gives the 1-based stage index of each tap (default 1..len).
    """
    losses = stage_feature_losses(taps_t, taps_s)
    stages = stages or range(1, len(losses) + 1)
    total = None
    for j, l in zip(stages, losses):
        term = l * float(j) ** h.feat_exponent
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    cls: Tensor
    ce: Tensor
    kl: Tensor
    feat: Tensor
    feat_stages: list

    def as_dict(self) -> dict:
        d = {"loss": float(self.total.data), "cls": float(self.cls.data), "ce": float(self.ce.data),
             "kl": float(self.kl.data), "feat": float(self.feat.data)}
        for j, f in enumerate(self.feat_stages, 1):
            d[f"feat{j}"] = float(f.data)
        return d


def combined_loss(student_out, teacher_out, y, h: DistillHyper = DistillHyper()):
    """l_cls + lambda * l_feat with CE on CLS logits and KL on distillation-token logits."""
    z_kd = student_out.distill_logits if student_out.distill_logits is not None else student_out.cls_logits
    z_t = teacher_out.logits.detach()
    ce = cross_entropy(student_out.cls_logits, y)
    kl = kd_term(z_kd, z_t, h)
    cls = ce * (1.0 - h.alpha) + kl * h.alpha
    stage_losses = stage_feature_losses(teacher_out.features, student_out.features)
    feat = None
    for j, l in enumerate(stage_losses, 1):
        term = l * float(j) ** h.feat_exponent
        feat = term if feat is None else feat + term
    total = cls + feat * h.lam
    return total, LossBreakdown(total, cls, ce, kl, feat, stage_losses)
