"""Two-step training: teacher on CE, then student (plain CE or distilled)."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import distill as KD
from .. import models as M
from .. import tensor as T
from .data import DatasetSplit, augment, balance_dataset, flip_only, iterate_batches
from .metrics import MetricsLog
from .optim import init_optimizer, optimizer_step
from .schedule import ScheduleConfig, schedule_lr

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    cosine: bool = False
    warmup_epochs: int = 5
    lr_min: float = 2e-5
    augment: str = "teacher"
    balance: bool = True
    keep: str = "best"  # "best" epoch by validation (else train) accuracy, or "last"

    def __post_init__(self):
        if self.keep not in ("best", "last"):
            raise ValueError(f"keep must be 'best' or 'last', got {self.keep!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")


TEACHER_CONFIG = TrainConfig()
STUDENT_CONFIG = TrainConfig(optimizer="adamw", lr=5e-5, weight_decay=0.1, cosine=True, augment="student",
                             balance=False)


@dataclass
class TrainResult:
    model: object
    metrics: MetricsLog
    best_accuracy: float
    best_epoch: int
    steps: int
    config: TrainConfig = field(default=None)


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray




def _logits(model, x):
    out = model(x)
    if isinstance(out, M.TeacherOutput):
        return out.logits
    return M.inference_logits(out)


def evaluate(model, split: DatasetSplit, batch_size: int = 64) -> EvalResult:
    """Top-1 accuracy, per-class accuracy and a K x K confusion matrix (rows = true class)."""
    was_training = model.training
    model.eval()
    k = split.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    with T.no_grad():
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            pred = _logits(model, T.Tensor(split.images[sl])).data.argmax(axis=-1)
            np.add.at(conf, (split.labels[sl], pred), 1)
    model.train(was_training)
    return confusion_summary(conf)


def confusion_summary(conf: np.ndarray) -> EvalResult:
    totals = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), totals, out=np.zeros(len(conf)), where=totals > 0)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return EvalResult(acc, per_class, conf)


def _check_finite(loss: T.Tensor, step: int):
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite loss {float(loss.data)} at step {step}")


def _lr_for(cfg: TrainConfig, sched: ScheduleConfig | None, step: int) -> float:
    return schedule_lr(sched, step) if sched is not None else cfg.lr


def _fit(model, split, cfg: TrainConfig, seed: int, loss_fn, metrics: MetricsLog, val: DatasetSplit | None):
    data = balance_dataset(split) if cfg.balance else split
    rng = np.random.default_rng([seed, 17])
    params = model.parameters()
    opt = init_optimizer(params, cfg.optimizer, cfg.lr, cfg.weight_decay)
    steps_per_epoch = max(1, sum(1 for _ in iterate_batches(len(data), cfg.batch_size, np.random.default_rng(0))))
    sched = None
    if cfg.cosine:
        sched = ScheduleConfig(cfg.epochs, steps_per_epoch, cfg.warmup_epochs, cfg.lr, min(cfg.lr_min, cfg.lr))
    best_acc, best_epoch, best_state = -1.0, -1, None
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        tot_loss, correct, seen = 0.0, 0, 0
        for idx in iterate_batches(len(data), cfg.batch_size, rng):
            images, flips = augment(data.images[idx], cfg.augment, rng, return_flips=True)
            y = data.labels[idx]
            opt.lr = _lr_for(cfg, sched, step)
            model.zero_grad()
            loss, terms, logits = loss_fn(T.Tensor(images), y, idx, flips)
            _check_finite(loss, step)
            loss.backward()
            ok = optimizer_step(opt, params)
            acc = float((logits.data.argmax(-1) == y).mean())
            metrics.log(kind="step", step=step, epoch=epoch, lr=opt.lr, **terms, acc=acc,
                        **({} if ok else {"skipped": 1}))
            tot_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(-1) == y).sum())
            seen += len(idx)
            step += 1
        rec = dict(kind="epoch", epoch=epoch, train_loss=tot_loss / max(seen, 1), train_acc=correct / max(seen, 1))
        score = rec["train_acc"]
        if val is not None and (cfg.keep == "best" or epoch == cfg.epochs - 1):
            rec["val_acc"] = score = evaluate(model, val).accuracy
        metrics.log(**rec)
        if cfg.keep == "best" and score > best_acc:
            best_acc, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_acc, best_epoch = score, cfg.epochs - 1
    model.eval()
    return TrainResult(model, metrics, best_acc, best_epoch, step, cfg)


def train_teacher(spec: M.TeacherSpec, split: DatasetSplit, cfg: TrainConfig = TEACHER_CONFIG, seed: int = 0,
                  val: DatasetSplit | None = None, metrics: MetricsLog | None = None) -> TrainResult:
    """Cross-entropy training of the CNN teacher; the best-accuracy epoch is retained."""
    model = M.build_teacher(spec, split.num_classes, seed)
    metrics = metrics or MetricsLog()

    def loss_fn(x, y, idx, flips):
        logits = model(x).logits
        loss = KD.cross_entropy(logits, y)
        return loss, {"loss": float(loss.data), "ce": float(loss.data)}, logits

    return _fit(model, split, cfg, seed, loss_fn, metrics, val)


class TeacherCache:
    """Frozen-teacher outputs for every sample and its mirror image.

    The teacher runs in eval mode without gradients, so under a flip-only
    augmentation its output for a batch is a gather from this table.
    """

    def __init__(self, teacher, split: DatasetSplit, batch_size: int = 64):
        teacher.eval()
        self.tables = []
        for flipped in (False, True):
            logits, feats = [], []
            with T.no_grad():
                for start in range(0, len(split), batch_size):
                    x = split.images[start:start + batch_size]
                    out = teacher(T.Tensor(x[..., ::-1] if flipped else x))
                    logits.append(out.logits.data)
                    feats.append([f.data for f in out.features])
            self.tables.append((np.concatenate(logits), [np.concatenate(f) for f in zip(*feats)]))

    def lookup(self, idx, flips) -> M.TeacherOutput:
        idx, flips = np.asarray(idx), np.asarray(flips, dtype=bool)
        (l0, f0), (l1, f1) = self.tables
        pick = flips.reshape(-1, *([1] * (l0.ndim - 1)))
        logits = np.where(pick, l1[idx], l0[idx])
        feats = [np.where(flips.reshape(-1, *([1] * (a.ndim - 1))), b[idx], a[idx]) for a, b in zip(f0, f1)]
        return M.TeacherOutput(T.Tensor(logits), [T.Tensor(f) for f in feats])


def train_student(spec: M.StudentSpec, split: DatasetSplit, cfg: TrainConfig = STUDENT_CONFIG, seed: int = 0,
                  teacher=None, hyper: KD.DistillHyper = KD.DistillHyper(), distill: bool = True,
                  val: DatasetSplit | None = None, metrics: MetricsLog | None = None) -> TrainResult:
    """Train the student.

    Distilled mode optimizes the combined objective against a frozen teacher
    (eval mode, no gradient); plain mode uses CE on CLS logits only and never
    touches a teacher.
    """
    metrics = metrics or MetricsLog()
    if distill:
        if teacher is None:
            raise ValueError("distilled training needs a teacher checkpoint")
        spec = spec.with_distill(True)
        M.validate_pair(teacher.spec, spec)
        teacher.eval()
        teacher.tap_source = spec.stage1_tap
    else:
        if teacher is not None:
            raise ValueError("plain student training must not be given a teacher")
        spec = spec.with_distill(False)
    model = M.build_student(spec, split.num_classes, seed)

    if distill:
        data = balance_dataset(split) if cfg.balance else split
        cache = TeacherCache(teacher, data) if flip_only(cfg.augment) else None

        def loss_fn(x, y, idx, flips):
            if cache is not None:
                t_out = cache.lookup(idx, flips)
            else:
                with T.no_grad():
                    t_out = teacher(x)
            s_out = model(x)
            loss, br = KD.combined_loss(s_out, t_out, y, hyper)
            return loss, br.as_dict(), M.inference_logits(s_out)
    else:
        def loss_fn(x, y, idx, flips):
            out = model(x)
            loss = KD.cross_entropy(out.cls_logits, y)
            return loss, {"loss": float(loss.data), "ce": float(loss.data)}, out.cls_logits

    return _fit(model, split, cfg, seed, loss_fn, metrics, val)
