"""Data-size sweep: plain vs distilled students over per-class subset caps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .. import distill as KD
from .. import models as M
from .data import DatasetSplit, class_subset, synthetic_dataset
from .loop import STUDENT_CONFIG, TEACHER_CONFIG, evaluate, train_student, train_teacher
from .metrics import MetricsLog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    """Budgets for the desk-scale sweep.

    ``student_epochs`` is given per cap (same order as ``caps``); one teacher
    trained on ``teacher_samples`` images serves every seed.
    """

    caps: tuple = (8, 32, 128)
    seeds: tuple = (0, 1, 2, 3, 4)
    student_epochs: tuple = (40, 16, 6)
    teacher_epochs: int = 6
    teacher_samples: int = 2000
    test_samples: int = 400
    image_size: int = 64
    num_classes: int = 4
    batch_size: int = 16
    student_lr: float = 1e-3
    teacher_seed: int = 0
    data_seed: int = 1000
    noise: float = 0.12
    clutter: int = 2

    def __post_init__(self):
        if len(self.student_epochs) != len(self.caps):
            raise ValueError(f"{len(self.caps)} caps but {len(self.student_epochs)} epoch budgets")
        if any(c < 1 for c in self.caps):
            raise ValueError("caps must be positive")


@dataclass
class SweepRow:
    cap: int
    seed: int
    plain: float
    distilled: float

    @property
    def gap(self) -> float:
        return self.distilled - self.plain


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    teacher_accuracy: float = float("nan")
    seconds: float = 0.0

    def caps(self) -> list:
        return sorted({r.cap for r in self.rows})

    def seeds(self) -> list:
        return sorted({r.seed for r in self.rows})

    def summary(self) -> list:
        """Per cap: (size, median plain, median distilled, gap of medians)."""
        out = []
        for cap in self.caps():
            sel = [r for r in self.rows if r.cap == cap]
            p = float(np.median([r.plain for r in sel]))
            d = float(np.median([r.distilled for r in sel]))
            out.append((cap, p, d, d - p))
        return out

    def seed_gaps(self, seed: int) -> list:
        return [r.gap for r in sorted(self.rows, key=lambda r: r.cap) if r.seed == seed]

    def non_increasing_seeds(self) -> int:
        """Seeds whose gap never rises from the smallest cap to the largest."""
        count = 0
        for s in self.seeds():
            g = self.seed_gaps(s)
            count += all(a >= b for a, b in zip(g, g[1:]))
        return count


def sweep_data(cfg: SweepConfig) -> tuple:
    """(train split, held-out test split); student subsets are drawn from the train split."""
    kw = dict(noise=cfg.noise, clutter=cfg.clutter)
    train = synthetic_dataset(cfg.teacher_samples, cfg.image_size, cfg.num_classes, seed=cfg.data_seed, **kw)
    test = synthetic_dataset(cfg.test_samples, cfg.image_size, cfg.num_classes, seed=cfg.data_seed + 1, **kw)
    return train, test


def check_caps(split: DatasetSplit, caps) -> None:
    hist = split.histogram()
    for cap in caps:
        if cap > hist.min():
            raise ValueError(f"cap {cap}/class exceeds the smallest class population {int(hist.min())}")


def sweep_teacher(cfg: SweepConfig, train: DatasetSplit, spec: M.TeacherSpec = M.DESK_TEACHER,
                  metrics: MetricsLog | None = None):
    tcfg = replace(TEACHER_CONFIG, epochs=cfg.teacher_epochs, batch_size=cfg.batch_size, keep="last")
    return train_teacher(spec, train, tcfg, seed=cfg.teacher_seed, metrics=metrics).model


def run_sweep(cfg: SweepConfig, teacher=None, student_spec: M.StudentSpec = M.DESK_STUDENT,
              hyper: KD.DistillHyper = KD.DistillHyper(), data=None, progress=None) -> SweepResult:
    """Train both student variants per (cap, seed); variants share subset and init seed."""
    t0 = time.time()
    train, test = data or sweep_data(cfg)
    check_caps(train, cfg.caps)
    if teacher is None:
        teacher = sweep_teacher(cfg, train)
    result = SweepResult(teacher_accuracy=evaluate(teacher, test).accuracy)
    log.info("teacher test accuracy %.4f", result.teacher_accuracy)
    for cap, epochs in zip(cfg.caps, cfg.student_epochs):
        scfg = replace(STUDENT_CONFIG, epochs=epochs, batch_size=cfg.batch_size, lr=cfg.student_lr,
                       lr_min=cfg.student_lr / 10, warmup_epochs=max(1, epochs // 10), keep="last")
        for seed in cfg.seeds:
            subset = class_subset(train, cap, seed)
            acc = {}
            for distill in (False, True):
                res = train_student(student_spec, subset, scfg, seed=seed, teacher=teacher if distill else None,
                                    hyper=hyper, distill=distill)
                acc[distill] = evaluate(res.model, test).accuracy
            row = SweepRow(cap, seed, acc[False], acc[True])
            result.rows.append(row)
            log.info("cap=%d seed=%d plain=%.4f distilled=%.4f", cap, seed, row.plain, row.distilled)
            if progress:
                progress(row)
    result.seconds = time.time() - t0
    return result


def write_sweep_csv(result: SweepResult, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("size,plain,distilled,gap\n")
        for cap, p, d, g in result.summary():
            fh.write(f"{cap},{p:.6f},{d:.6f},{g:.6f}\n")


def write_rows_csv(result: SweepResult, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("size,seed,plain,distilled,gap\n")
        for r in result.rows:
            fh.write(f"{r.cap},{r.seed},{r.plain:.6f},{r.distilled:.6f},{r.gap:.6f}\n")
