"""Command-line entry point: train, sweep, analyze, gradcheck, export-activations, replay, plot.

Exit codes: 0 success, 1 usage error (bad flags, missing files, invalid
specs), 2 numeric failure (gradient check above threshold, divergence).
Every command that writes to ``--out`` also writes ``config.json``, the
resolved configuration that ``replay`` re-executes.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import complexity as C
from . import distill as KD
from . import export as X
from . import models as M
from . import tensor as T

log = logging.getLogger("hdkd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(s: str) -> list:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


# -- shared pieces --------------------------------------------------------------

def _spec(name: str, stride: int | None = None, image_size: int | None = None):
    try:
        spec = M.load_spec(name)
    except FileNotFoundError:
        raise UsageError(f"spec {name!r} is neither a preset ({', '.join(M.PRESETS)}) nor a file") from None
    except (ValueError, KeyError) as e:
        raise UsageError(f"invalid spec {name!r}: {e}") from None
    if stride is not None:
        spec = replace(spec, stem_stride=stride)
    if image_size is not None:
        spec = replace(spec, image_size=image_size)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(f"invalid spec: {e}") from None
    return spec


def _data(args, image_size: int):
    from .trainer import synthetic_dataset, load_image_dir

    if args.dataset:
        if not os.path.isdir(args.dataset):
            raise UsageError(f"dataset directory {args.dataset!r} not found")
        full = load_image_dir(args.dataset, image_size)
        rng = np.random.default_rng([args.seed, 5])
        order = rng.permutation(len(full))
        n_val = max(1, int(round(len(full) * args.val_fraction)))
        return full.take(np.sort(order[n_val:])), full.take(np.sort(order[:n_val]))
    train = synthetic_dataset(args.samples, image_size, args.classes, seed=args.data_seed)
    val = synthetic_dataset(args.val_samples, image_size, args.classes, seed=args.data_seed + 1)
    return train, val


def _hyper(args) -> KD.DistillHyper:
    try:
        return KD.DistillHyper(alpha=args.alpha, temperature=args.temperature, lam=args.lam,
                               feat_exponent=args.feat_exponent)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def write_config(args, out: str) -> str:
    """Snapshot every resolved flag plus precision and version."""
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg["precision"] = T.precision_name()
    cfg["version"] = __version__
    path = os.path.join(out, CONFIG_NAME)
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return path


def _load_teacher(path: str):
    from .trainer import load_model

    if not path or not os.path.isfile(path):
        raise UsageError(f"teacher checkpoint {path!r} not found")
    try:
        model, manifest = load_model(path)
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot load teacher checkpoint {path!r}: {e}") from None
    if manifest.get("kind") != "teacher":
        raise UsageError(f"{path!r} holds a {manifest.get('kind')} checkpoint, not a teacher")
    return model


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .plotting import plot_metrics
    from .trainer import (STUDENT_CONFIG, TEACHER_CONFIG, MetricsLog, evaluate, save_checkpoint, train_student,
                          train_teacher)

    default = args.spec or ("desk-teacher" if args.role == "teacher" else "desk-student")
    spec = _spec(default, args.stride, args.image_size)
    if args.role == "teacher" and not isinstance(spec, M.TeacherSpec):
        raise UsageError("train teacher needs a teacher spec")
    if args.role == "student" and not isinstance(spec, M.StudentSpec):
        raise UsageError("train student needs a student spec")
    if args.role == "teacher" and (args.distill or args.teacher_ckpt):
        raise UsageError("--distill/--teacher-ckpt apply to student training only")
    teacher = None
    if args.role == "student" and args.distill:
        if not args.teacher_ckpt:
            raise UsageError("distilled student training requires --teacher-ckpt")
        teacher = _load_teacher(args.teacher_ckpt)
    hyper = _hyper(args)
    train, val = _data(args, spec.image_size)
    out = _outdir(args)
    write_config(args, out)
    base = TEACHER_CONFIG if args.role == "teacher" else STUDENT_CONFIG
    overrides = {"batch_size": args.batch}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr"] = args.lr
        overrides["lr_min"] = min(base.lr_min, args.lr)
    cfg = replace(base, **overrides)
    metrics = MetricsLog(os.path.join(out, "metrics.txt"))
    if args.role == "teacher":
        res = train_teacher(spec, train, cfg, args.seed, val=val, metrics=metrics)
    else:
        if args.per_class:
            from .trainer import class_subset
            train = class_subset(train, args.per_class, args.seed)
        res = train_student(spec, train, cfg, args.seed, teacher=teacher, hyper=hyper, distill=args.distill,
                            val=val, metrics=metrics)
    ev = evaluate(res.model, val)
    metrics.log(kind="final", val_acc=ev.accuracy, best_epoch=res.best_epoch, steps=res.steps)
    ckpt = os.path.join(out, f"{args.role}.ckpt")
    save_checkpoint(ckpt, res.model, {"seed": args.seed, "step": res.steps, "val_acc": ev.accuracy,
                                      "distill": bool(args.distill)})
    plot_metrics(metrics.records, os.path.join(out, "metrics.png"))
    np.savetxt(os.path.join(out, "confusion.csv"), ev.confusion, delimiter=",", fmt="%d")
    print(f"{args.role}: val_acc={ev.accuracy:.4f} best_epoch={res.best_epoch} steps={res.steps} -> {ckpt}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .plotting import plot_sweep
    from .trainer import save_checkpoint
    from .trainer.sweep import SweepConfig, run_sweep, sweep_data, sweep_teacher, write_rows_csv, write_sweep_csv

    epochs = args.student_epochs or list(SweepConfig.student_epochs)
    if len(epochs) == 1:
        epochs = epochs * len(args.sizes)
    try:
        cfg = SweepConfig(caps=tuple(args.sizes), seeds=tuple(args.seeds), student_epochs=tuple(epochs),
                          teacher_epochs=args.teacher_epochs, teacher_samples=args.samples,
                          test_samples=args.val_samples, batch_size=args.batch, student_lr=args.lr,
                          teacher_seed=args.seed, data_seed=args.data_seed, num_classes=args.classes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    hyper = _hyper(args)
    data = sweep_data(cfg)
    hist = data[0].histogram()
    if max(cfg.caps) > hist.min():
        raise UsageError(f"cap {max(cfg.caps)}/class exceeds the available {int(hist.min())} images per class")
    teacher = _load_teacher(args.teacher_ckpt) if args.teacher_ckpt else None
    out = _outdir(args)
    write_config(args, out)
    if teacher is None:
        teacher = sweep_teacher(cfg, data[0])
        save_checkpoint(os.path.join(out, "teacher.ckpt"), teacher, {"seed": cfg.teacher_seed})
    res = run_sweep(cfg, teacher=teacher, hyper=hyper, data=data,
                    progress=lambda r: print(f"size={r.cap} seed={r.seed} plain={r.plain:.4f} "
                                             f"distilled={r.distilled:.4f} gap={r.gap:+.4f}", flush=True))
    write_sweep_csv(res, os.path.join(out, "sweep.csv"))
    write_rows_csv(res, os.path.join(out, "sweep_seeds.csv"))
    plot_sweep(res.summary(), os.path.join(out, "sweep.png"), res.rows)
    print(f"teacher test accuracy {res.teacher_accuracy:.4f}")
    print("size,plain,distilled,gap")
    for cap, p, d, g in res.summary():
        print(f"{cap},{p:.4f},{d:.4f},{g:+.4f}")
    return EXIT_OK


def analyze_report(spec, image_size: int, num_classes: int, convention: str = "auto") -> dict:
    """Per-stage params and FLOPs; pure apart from deterministic model construction."""
    build = M.build_teacher if isinstance(spec, M.TeacherSpec) else M.build_student
    model = build(spec, num_classes, 0)
    if convention == "auto":
        convention = C.calibrate_convention(M.build_teacher(M.TEACHER, num_classes, 0), (3, 224, 224))
    shape = (spec.in_channels, image_size, image_size)
    costs = C.stage_costs(model, shape)
    params = C.param_breakdown(model)
    rows = [(name, params.get(name, 0), cost.flops(convention)) for name, cost in costs.items()]
    total = sum(costs.values(), C.Cost()).flops(convention)
    return {"convention": convention, "rows": rows, "params": C.count_params(model), "flops": total}


def _num(v: float) -> str:
    return f"{int(v):d}" if float(v).is_integer() else f"{v:.1f}"


def cmd_analyze(args) -> int:
    spec = _spec(args.spec or "teacher", args.stride, args.image_size)
    rep = analyze_report(spec, spec.image_size, args.classes, args.convention)
    print(f"spec={args.spec or 'teacher'} input=3x{spec.image_size}x{spec.image_size} "
          f"stem_stride={spec.stem_stride} classes={args.classes} convention={rep['convention']}")
    print(f"{'stage':8s} {'params':>12s} {'FLOPs':>16s}")
    for name, p, f in rep["rows"]:
        print(f"{name:8s} {p:12d} {_num(f):>16s}")
    print(f"{'total':8s} {rep['params']:12d} {_num(rep['flops']):>16s}")
    print(f"total: {rep['params'] / 1e6:.4f}M params, {rep['flops'] / 1e9:.4f}G FLOPs")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("stage,params,flops\n")
            for name, p, f in rep["rows"]:
                fh.write(f"{name},{p},{_num(f)}\n")
            fh.write(f"total,{rep['params']},{_num(rep['flops'])}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.scope, args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise NumericFailure(f"{len(failed)} gradient checks above threshold")
    return EXIT_OK


def cmd_export(args) -> int:
    from .plotting import plot_activation
    from .trainer import load_model

    if not os.path.isfile(args.ckpt):
        raise UsageError(f"checkpoint {args.ckpt!r} not found")
    if not os.path.isfile(args.image):
        raise UsageError(f"image {args.image!r} not found")
    try:
        model, _ = load_model(args.ckpt)
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot load checkpoint {args.ckpt!r}: {e}") from None
    try:
        image = X.load_image(args.image, args.image_size or model.spec.image_size)
    except OSError as e:
        raise UsageError(f"cannot read image {args.image!r}: {e}") from None
    out = _outdir(args)
    write_config(args, out)
    amap = X.activation_map(model, image)
    X.write_map_csv(amap, os.path.join(out, "activation.csv"))
    X.write_pgm(amap, os.path.join(out, "activation.pgm"))
    plot_activation(amap, os.path.join(out, "activation.png"), image)
    print(f"activation map {amap.shape[0]}x{amap.shape[1]} -> {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_metrics
    from .trainer import read_metrics

    if not os.path.isfile(args.metrics):
        raise UsageError(f"metrics file {args.metrics!r} not found")
    print(plot_metrics(read_metrics(args.metrics), args.out))
    return EXIT_OK


def cmd_replay(args) -> int:
    if not os.path.isfile(args.config):
        raise UsageError(f"config {args.config!r} not found")
    with open(args.config) as fh:
        cfg = json.load(fh)
    cfg.pop("version", None)
    precision = cfg.pop("precision", "f32")
    command = cfg.get("command")
    if command not in COMMANDS or command == "replay":
        raise UsageError(f"config names no replayable command: {command!r}")
    ns = argparse.Namespace(**cfg)
    if args.out:
        ns.out = args.out
    with T.precision(precision):
        return COMMANDS[command](ns)


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck,
            "export-activations": cmd_export, "plot": cmd_plot, "replay": cmd_replay}


# -- parser -----------------------------------------------------------------------

def _add_data(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="directory with one sub-directory of images per class")
    src.add_argument("--synthetic", action="store_true", help="generated geometric-pattern images (default)")
    p.add_argument("--samples", type=int, default=2000, help="synthetic training images")
    p.add_argument("--val-samples", type=int, default=400, help="synthetic held-out images")
    p.add_argument("--val-fraction", type=float, default=0.2, help="held-out share of --dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--data-seed", type=int, default=1000)


def _add_hyper(p):
    d = KD.DistillHyper()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--feat-exponent", type=float, default=d.feat_exponent)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdkd", description="Hybrid CNN-transformer distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"hdkd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train a teacher or a (plain/distilled) student")
    p.add_argument("role", choices=("teacher", "student"))
    p.add_argument("--spec", help="preset name or spec file")
    _add_data(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float)
    p.add_argument("--stride", type=int, choices=(2, 4))
    p.add_argument("--image-size", type=int)
    p.add_argument("--per-class", type=int, help="cap training images per class (students)")
    p.add_argument("--distill", action="store_true")
    p.add_argument("--teacher-ckpt")
    _add_hyper(p)
    p.add_argument("--out", default="runs/train")

    p = sub.add_parser("sweep", help="plain vs distilled students over per-class caps")
    p.add_argument("--sizes", type=_int_list, default=[8, 32, 128])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--student-epochs", type=_int_list, help="one value, or one per size")
    p.add_argument("--teacher-epochs", type=int, default=6)
    p.add_argument("--teacher-ckpt", help="reuse a trained teacher instead of training one")
    p.add_argument("--seed", type=int, default=0, help="teacher seed")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3, help="student learning rate")
    _add_data(p)
    _add_hyper(p)
    p.add_argument("--out", default="runs/sweep")

    p = sub.add_parser("analyze", help="parameter and FLOP report per stage")
    p.add_argument("--spec", help="preset name or spec file (default: teacher)")
    p.add_argument("--image-size", type=int)
    p.add_argument("--stride", type=int, choices=(2, 4))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--convention", choices=("auto",) + C.CONVENTIONS, default="auto")
    p.add_argument("--csv", help="also write the report as CSV")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite (64-bit)")
    p.add_argument("scope", nargs="?", choices=("ops", "blocks", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-activations", help="stage-3 activation map as CSV + PGM + PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--image-size", type=int, help="resize input (default: the checkpoint spec's size)")
    p.add_argument("--out", default="runs/activations")

    p = sub.add_parser("replay", help="re-run a command from its config.json")
    p.add_argument("config")
    p.add_argument("--out", help="write artifacts here instead of the recorded directory")

    p = sub.add_parser("plot", help="render a metrics file to PNG")
    p.add_argument("metrics")
    p.add_argument("--out", default="metrics.png")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    del args.verbose
    try:
        if args.command == "gradcheck":
            with T.precision("f64"):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"hdkd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"hdkd: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:  # divergence surfaces as a numeric failure
        from .trainer import DivergenceError

        if isinstance(e, DivergenceError):
            print(f"hdkd: numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
