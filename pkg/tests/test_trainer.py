import math
from dataclasses import replace

import numpy as np
import pytest

from hdkd import models as M
from hdkd import tensor as T
from hdkd.nn import Parameter
from hdkd.trainer import (STUDENT_CONFIG, TEACHER_CONFIG, AugmentPolicy, DatasetSplit, MetricsLog, ScheduleConfig,
                          SweepResult, SweepRow, TeacherCache, TrainConfig, augment, balance_dataset, class_subset,
                          class_subset_indices, evaluate, init_optimizer, load_model, optimizer_step, read_metrics,
                          save_checkpoint, schedule_lr, synthetic_dataset, train_student, train_teacher)
from hdkd.trainer.loop import confusion_summary
from hdkd.trainer.metrics import format_record, parse_record

FAST_T = replace(TEACHER_CONFIG, epochs=2, batch_size=8)
FAST_S = replace(STUDENT_CONFIG, epochs=2, batch_size=8, lr=1e-3, warmup_epochs=1, keep="last")


def param(v):
    return Parameter(np.array(v, dtype=np.float64))


# -- optimizer ------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters(f64):
    p = param([1.0, -2.0])
    opt = init_optimizer([p], "adam", lr=0.1)
    for _ in range(3):
        optimizer_step(opt, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_minus_lr(f64):
    p = param([0.5])
    opt = init_optimizer([p], "adam", lr=1e-3)
    optimizer_step(opt, [p], [np.ones(1)])
    # m_hat = 1, v_hat = 1 after bias correction
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adamw_without_decay_equals_adam(f64, rng):
    g = [rng.standard_normal(3) for _ in range(4)]
    a, b = param([0.1, 0.2, 0.3]), param([0.1, 0.2, 0.3])
    oa, ob = init_optimizer([a], "adam", lr=0.01), init_optimizer([b], "adamw", lr=0.01, weight_decay=0.0)
    for gi in g:
        optimizer_step(oa, [a], [gi])
        optimizer_step(ob, [b], [gi])
    assert np.array_equal(a.data, b.data)


def test_adamw_decay_on_zero_gradient(f64):
    p = param([2.0])
    opt = init_optimizer([p], "adamw", lr=0.01, weight_decay=0.1)
    optimizer_step(opt, [p], [np.zeros(1)])
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.1), abs=1e-15)


@pytest.mark.parametrize("lr", [1e-3, 0.05, 0.3])
def test_adam_quadratic_moves_toward_zero(f64, lr):
    p = param([1.5])
    opt = init_optimizer([p], "adam", lr=lr)
    optimizer_step(opt, [p], [p.data.copy()])  # grad of w^2/2
    assert 0 <= abs(p.data[0]) < 1.5


def test_nonfinite_gradient_skips_step(f64):
    p = param([1.0])
    opt = init_optimizer([p], "adam", lr=0.1)
    assert optimizer_step(opt, [p], [np.array([np.nan])]) is False
    assert p.data[0] == 1.0 and opt.skipped == 1 and opt.step == 0


def test_optimizer_shape_check(f64):
    p = param([1.0, 2.0])
    with pytest.raises(ValueError):
        optimizer_step(init_optimizer([p]), [p], [np.zeros(3)])


# -- schedule ---------------------------------------------------------------------

SCHED = ScheduleConfig(total_epochs=20, steps_per_epoch=10)


def test_schedule_landmarks():
    assert schedule_lr(SCHED, 0) == 0.0
    assert schedule_lr(SCHED, SCHED.warmup_steps) == pytest.approx(5e-5)
    assert schedule_lr(SCHED, SCHED.total_steps - 1) == pytest.approx(2e-5)
    # 21 cosine steps without warmup: step 10 sits at progress 1/2
    cfg = ScheduleConfig(total_epochs=21, steps_per_epoch=1, warmup_epochs=0)
    assert schedule_lr(cfg, 10) == pytest.approx(3.5e-5)


def test_schedule_continuous_at_warmup_boundary():
    w = SCHED.warmup_steps
    left = SCHED.lr_init * (w - 1e-9) / w
    assert schedule_lr(SCHED, w) == pytest.approx(left, rel=1e-8)
    assert schedule_lr(SCHED, w - 1) < schedule_lr(SCHED, w)


def test_schedule_monotone_decay_after_warmup():
    lrs = [schedule_lr(SCHED, s) for s in range(SCHED.warmup_steps, SCHED.total_steps)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(total_epochs=1, steps_per_epoch=1, lr_init=1e-5, lr_min=2e-5)
    with pytest.raises(ValueError):
        schedule_lr(SCHED, -1)


# -- augmentation, balancing, subsets ------------------------------------------------

def test_identity_policy_returns_input(rng):
    x = rng.random((3, 3, 8, 8)).astype(np.float32)
    assert augment(x, "identity", rng) is x


def test_forced_flip_twice_is_identity(rng):
    x = rng.random((2, 3, 8, 8)).astype(np.float32)
    pol = AugmentPolicy(flip_p=1.0)
    once, flips = augment(x, pol, rng, return_flips=True)
    assert flips.all()
    np.testing.assert_array_equal(once, x[..., ::-1])
    np.testing.assert_array_equal(augment(once, pol, rng), x)


@pytest.mark.parametrize("policy", ["student", "teacher"])
def test_augment_deterministic(policy):
    x = np.random.default_rng(0).random((4, 3, 12, 12)).astype(np.float32)
    a = augment(x, policy, np.random.default_rng(5))
    b = augment(x, policy, np.random.default_rng(5))
    assert np.array_equal(a, b) and a.shape == x.shape


def test_unknown_policy():
    with pytest.raises(ValueError):
        augment(np.zeros((1, 3, 4, 4)), "wild", np.random.default_rng())


def _split(counts):
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(counts)])
    images = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1)
    return DatasetSplit(images, labels, len(counts))


def test_balance_duplicates_minority():
    out = balance_dataset(_split([4, 1]))
    np.testing.assert_array_equal(out.histogram(), [4, 4])
    # the single B sample is copied
    assert set(out.images[out.labels == 1].ravel()) == {4.0}


def test_balance_keeps_balanced_split():
    split = _split([3, 3, 3])
    np.testing.assert_array_equal(balance_dataset(split).histogram(), [3, 3, 3])


def test_balance_rejects_empty_class():
    with pytest.raises(ValueError):
        balance_dataset(_split([2, 0]))


@pytest.mark.parametrize("cap", [50, 100, 150])
def test_subset_deterministic_and_exact(cap):
    split = _split([200, 180, 160])
    a = class_subset_indices(split, cap, seed=4)
    b = class_subset_indices(split, cap, seed=4)
    assert np.array_equal(a, b)
    np.testing.assert_array_equal(np.bincount(split.labels[a]), [cap] * 3)
    assert not np.array_equal(a, class_subset_indices(split, cap, seed=5))


def test_subset_takes_whole_small_class():
    split = _split([10, 3])
    np.testing.assert_array_equal(class_subset(split, 5, 0).histogram(), [5, 3])


def test_synthetic_dataset_is_balanced_and_seeded():
    a = synthetic_dataset(20, image_size=16, num_classes=4, seed=1)
    b = synthetic_dataset(20, image_size=16, num_classes=4, seed=1)
    assert np.array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.histogram(), [5, 5, 5, 5])
    assert a.images.min() >= 0 and a.images.max() <= 1


# -- evaluation ------------------------------------------------------------------------

class _Const:
    """Stand-in model returning fixed logits."""

    training = False

    def __init__(self, fn):
        self.fn = fn

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def __call__(self, x):
        return M.TeacherOutput(T.Tensor(self.fn(x.data)), [])


def test_evaluate_perfect_predictor():
    labels = np.arange(10) % 3
    split = DatasetSplit(labels.astype(np.float32).reshape(-1, 1, 1, 1), labels, 3)
    res = evaluate(_Const(lambda x: np.eye(3)[x.reshape(-1).astype(int)]), split)
    assert res.accuracy == 1.0
    np.testing.assert_array_equal(res.confusion, np.diag([4, 3, 3]))


def test_evaluate_constant_predictor():
    labels = np.array([0, 0, 0, 1, 2])
    split = DatasetSplit(np.zeros((5, 1, 1, 1), np.float32), labels, 3)
    res = evaluate(_Const(lambda x: np.tile([1.0, 0, 0], (len(x), 1))), split)
    assert res.accuracy == pytest.approx(0.6)
    assert res.accuracy == np.trace(res.confusion) / res.confusion.sum()


def test_confusion_summary_per_class():
    res = confusion_summary(np.array([[2, 1], [0, 0]]))
    np.testing.assert_allclose(res.per_class, [2 / 3, 0.0])


# -- training loops ----------------------------------------------------------------------

def test_train_teacher_deterministic_in_f64(f64, tiny_specs, tiny_split):
    teacher_spec, _ = tiny_specs
    a = train_teacher(teacher_spec, tiny_split, FAST_T, seed=3)
    b = train_teacher(teacher_spec, tiny_split, FAST_T, seed=3)
    assert a.metrics.records == b.metrics.records
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_teacher_first_epoch_loss_near_chance(tiny_specs, tiny_split):
    teacher_spec, _ = tiny_specs
    res = train_teacher(teacher_spec, tiny_split, FAST_T, seed=0)
    first = res.metrics.of_kind("epoch")[0]
    assert first["train_loss"] < math.log(tiny_split.num_classes) + 0.5


def test_teacher_keeps_best_epoch(tiny_specs, tiny_split):
    teacher_spec, _ = tiny_specs
    res = train_teacher(teacher_spec, tiny_split, replace(FAST_T, epochs=3), seed=0, val=tiny_split)
    vals = [r["val_acc"] for r in res.metrics.of_kind("epoch")]
    assert res.best_accuracy == max(vals)
    assert evaluate(res.model, tiny_split).accuracy == pytest.approx(res.best_accuracy)


@pytest.fixture
def tiny_teacher(tiny_specs, tiny_split):
    return train_teacher(tiny_specs[0], tiny_split, FAST_T, seed=0).model


def test_distilled_run_leaves_teacher_untouched(tiny_specs, tiny_split, tiny_teacher):
    before = {k: v.copy() for k, v in tiny_teacher.state_dict().items()}
    res = train_student(tiny_specs[1], tiny_split, FAST_S, seed=0, teacher=tiny_teacher)
    after = tiny_teacher.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    step = res.metrics.of_kind("step")[0]
    assert {"ce", "kl", "feat", "feat1", "feat2", "feat3", "cls", "loss", "lr", "acc"} <= set(step)
    assert res.model.distill_token


def test_distilled_run_uncached_path(tiny_specs, tiny_split, tiny_teacher):
    cfg = replace(FAST_S, epochs=1, augment="teacher")
    res = train_student(tiny_specs[1], tiny_split, cfg, seed=0, teacher=tiny_teacher)
    assert np.isfinite(res.metrics.of_kind("epoch")[0]["train_loss"])


def test_plain_mode_rejects_teacher(tiny_specs, tiny_split, tiny_teacher):
    with pytest.raises(ValueError):
        train_student(tiny_specs[1], tiny_split, FAST_S, teacher=tiny_teacher, distill=False)
    with pytest.raises(ValueError):
        train_student(tiny_specs[1], tiny_split, FAST_S, teacher=None, distill=True)


def test_plain_mode_is_ce_only(tiny_specs, tiny_split):
    res = train_student(tiny_specs[1], tiny_split, FAST_S, seed=0, distill=False)
    assert not res.model.distill_token
    assert set(res.metrics.of_kind("step")[0]) == {"kind", "step", "epoch", "lr", "loss", "ce", "acc"}


def test_student_rejects_mismatched_teacher(tiny_specs, tiny_split):
    other = M.TeacherSpec(blocks=(2, 2, 2), channels=(4, 8, 12), image_size=16, ca_reduction=4)
    teacher = M.build_teacher(other, 3)
    with pytest.raises(ValueError):
        train_student(tiny_specs[1], tiny_split, FAST_S, teacher=teacher)


def test_teacher_cache_matches_direct_forward(f64, tiny_specs, tiny_split, tiny_teacher):
    cache = TeacherCache(tiny_teacher, tiny_split, batch_size=5)
    idx, flips = np.array([3, 0, 7, 11]), np.array([True, False, False, True])
    x = tiny_split.images[idx].copy()
    x[flips] = x[flips][..., ::-1]
    with T.no_grad():
        direct = tiny_teacher(T.Tensor(x))
    got = cache.lookup(idx, flips)
    np.testing.assert_allclose(got.logits.data, direct.logits.data, rtol=1e-10, atol=1e-12)
    for a, b in zip(got.features, direct.features):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-10, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(keep="worst")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


# -- metrics and checkpoints ---------------------------------------------------------------

def test_metric_record_round_trip(tmp_path):
    rec = {"kind": "step", "step": 3, "lr": 1.25e-05, "loss": 0.1 + 0.2}
    assert parse_record(format_record(rec)) == rec
    log = MetricsLog(str(tmp_path / "m.txt"))
    log.log(**rec)
    log.log(kind="epoch", epoch=0, train_acc=0.5)
    assert read_metrics(str(tmp_path / "m.txt")) == log.records


def test_checkpoint_round_trip(tmp_path, tiny_specs, rng):
    s = M.build_student(tiny_specs[1], 3, seed=2)
    s.stages[0][0].bn1.running_mean[...] = rng.standard_normal(16)
    path = str(tmp_path / "s.ckpt")
    save_checkpoint(path, s, {"seed": 2})
    back, manifest = load_model(path)
    assert manifest["kind"] == "student" and back.spec == s.spec
    a, b = s.state_dict(), back.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_model(str(p))


# -- sweep bookkeeping --------------------------------------------------------------------

def test_sweep_summary_and_gap_checks():
    rows = [SweepRow(8, 0, 0.3, 0.5), SweepRow(8, 1, 0.4, 0.45), SweepRow(32, 0, 0.6, 0.62),
            SweepRow(32, 1, 0.5, 0.6)]
    res = SweepResult(rows)
    (c1, p1, d1, g1), (c2, p2, d2, g2) = res.summary()
    assert (c1, c2) == (8, 32)
    assert p1 == pytest.approx(0.35) and d1 == pytest.approx(0.475) and g1 == pytest.approx(d1 - p1)
    assert all(r.gap == pytest.approx(r.distilled - r.plain) for r in rows)
    assert res.non_increasing_seeds() == 1  # seed 0 shrinks 0.2 -> 0.02, seed 1 grows 0.05 -> 0.1


@pytest.mark.slow
def test_teacher_fits_separable_synthetic_set():
    # no distractor blobs and little noise: the shape alone decides the class
    split = synthetic_dataset(160, image_size=32, num_classes=4, seed=2, noise=0.02, clutter=0)
    spec = M.TeacherSpec(blocks=(2, 2, 3), channels=M.DESK_CHANNELS, image_size=32)
    cfg = replace(TEACHER_CONFIG, epochs=30, batch_size=16, augment="identity", keep="last")
    res = train_teacher(spec, split, cfg, seed=0)
    assert max(r["train_acc"] for r in res.metrics.of_kind("epoch")) >= 0.95
