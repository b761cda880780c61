import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from hdkd import cli
from hdkd import export as X
from hdkd import models as M
from hdkd import tensor as T
from hdkd.trainer import read_metrics, save_checkpoint
from tests.conftest import TINY_STUDENT, TINY_TEACHER

SMALL_DATA = ["--samples", "24", "--val-samples", "12", "--classes", "3", "--batch", "8"]


@pytest.fixture
def spec_files(tmp_path):
    t, s = tmp_path / "teacher.ini", tmp_path / "student.ini"
    t.write_text(M.format_spec(TINY_TEACHER))
    s.write_text(M.format_spec(TINY_STUDENT))
    return str(t), str(s)


@pytest.fixture
def trained_teacher(tmp_path, spec_files):
    out = tmp_path / "t"
    assert cli.main(["train", "teacher", "--spec", spec_files[0], "--synthetic", "--seed", "7", "--epochs", "1",
                     *SMALL_DATA, "--out", str(out)]) == 0
    return out


def test_train_teacher_artifacts(trained_teacher):
    names = set(os.listdir(trained_teacher))
    assert {"config.json", "metrics.txt", "teacher.ckpt", "metrics.png", "confusion.csv"} <= names
    cfg = json.loads((trained_teacher / "config.json").read_text())
    assert cfg["command"] == "train" and cfg["role"] == "teacher" and cfg["seed"] == 7
    kinds = {r["kind"] for r in read_metrics(str(trained_teacher / "metrics.txt"))}
    assert kinds == {"step", "epoch", "final"}


def test_train_distilled_student_logs_breakdown(tmp_path, spec_files, trained_teacher):
    out = tmp_path / "s"
    rc = cli.main(["train", "student", "--spec", spec_files[1], "--distill", "--teacher-ckpt",
                   str(trained_teacher / "teacher.ckpt"), "--epochs", "1", *SMALL_DATA, "--out", str(out)])
    assert rc == 0
    step = read_metrics(str(out / "metrics.txt"))[0]
    assert {"ce", "kl", "feat1", "feat2", "feat3"} <= set(step)


def test_replay_is_bit_exact_in_f64(tmp_path, spec_files):
    out = tmp_path / "r"
    with T.precision("f64"):
        assert cli.main(["train", "teacher", "--spec", spec_files[0], "--epochs", "1", *SMALL_DATA,
                         "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["precision"] == "f64"
    assert cli.main(["replay", str(out / "config.json"), "--out", str(tmp_path / "r2")]) == 0
    assert (out / "metrics.txt").read_text() == (tmp_path / "r2" / "metrics.txt").read_text()


@pytest.mark.parametrize("argv", [
    ["train", "student", "--distill"],                               # missing teacher checkpoint
    ["train", "student", "--distill", "--teacher-ckpt", "/nope.ckpt"],
    ["train", "teacher", "--spec", "no-such-spec"],
    ["train", "teacher", "--spec", "desk-student"],                  # wrong model kind
    ["train", "teacher", "--alpha", "3"],
    ["analyze", "--convention", "4mac"],
    ["sweep", "--sizes", "8,x"],
    ["export-activations", "--ckpt", "/nope.ckpt", "--image", "/nope.png"],
    ["replay", "/nope.json"],
    ["plot", "/nope.txt"],
])
def test_usage_errors_exit_one(argv, tmp_path):
    with pytest.raises(SystemExit) as exc:
        sys.exit(cli.main(argv + (["--out", str(tmp_path / "o")] if argv[0] == "train" else [])))
    assert exc.value.code == 1


def test_sweep_infeasible_cap(tmp_path):
    rc = cli.main(["sweep", "--sizes", "8,500", "--student-epochs", "1", "--samples", "40", "--out", str(tmp_path)])
    assert rc == 1


def test_divergence_exits_two(tmp_path, spec_files, monkeypatch, capsys):
    import hdkd.trainer as TR

    real = TR.synthetic_dataset

    def poisoned(*a, **kw):
        split = real(*a, **kw)
        split.images[:, 0, 0, 0] = np.nan
        return split

    monkeypatch.setattr(TR, "synthetic_dataset", poisoned)
    with np.errstate(invalid="ignore"):
        rc = cli.main(["train", "teacher", "--spec", spec_files[0], "--epochs", "1", *SMALL_DATA,
                       "--out", str(tmp_path / "d")])
    assert rc == 2
    assert "non-finite loss" in capsys.readouterr().err


def test_gradcheck_failure_exits_two(monkeypatch, capsys):
    from hdkd import gradcheck

    bad = gradcheck.CheckResult("fake", "ops", 1.0, 1e-4)
    monkeypatch.setattr(gradcheck, "run_suite", lambda scope, seed: [bad])
    assert cli.main(["gradcheck", "ops"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_ops_passes(capsys):
    assert cli.main(["gradcheck", "ops"]) == 0
    out = capsys.readouterr().out
    assert "passed" in out and "FAIL" not in out


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "hdkd.cli", "analyze", "--spec", "nope"], capture_output=True,
                          text=True)
    assert proc.returncode == 1 and "error" in proc.stderr


# -- analyze ---------------------------------------------------------------------------

def test_analyze_stages_add_up(tmp_path, capsys):
    path = tmp_path / "a.csv"
    assert cli.main(["analyze", "--spec", "teacher", "--csv", str(path)]) == 0
    rows = list(csv.DictReader(open(path)))
    stages, total = rows[:-1], rows[-1]
    assert [r["stage"] for r in stages] == ["stem", "stage1", "stage2", "stage3", "head"]
    assert sum(int(r["params"]) for r in stages) == int(total["params"])
    assert sum(float(r["flops"]) for r in stages) == pytest.approx(float(total["flops"]))
    assert "convention=mac" in capsys.readouterr().out


def test_analyze_is_pure():
    a = cli.analyze_report(M.HDKD, 224, 4)
    b = cli.analyze_report(M.HDKD, 224, 4)
    assert a == b


def test_analyze_stride_four_reduces_flops():
    s2 = cli.analyze_report(M.TEACHER, 224, 4)
    s4 = cli.analyze_report(M.TeacherSpec(stem_stride=4), 224, 4)
    assert s4["params"] == s2["params"]
    assert s4["flops"] / s2["flops"] == pytest.approx(0.25, abs=0.01)


# -- sweep -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    rc = cli.main(["sweep", "--sizes", "8,16,32", "--seeds", "0", "--student-epochs", "1", "--teacher-epochs", "1",
                   "--samples", "128", "--val-samples", "16", "--out", str(out)])
    assert rc == 0
    return out


def test_sweep_table_contract(sweep_dir):
    rows = list(csv.DictReader(open(sweep_dir / "sweep.csv")))
    assert list(rows[0]) == ["size", "plain", "distilled", "gap"]
    assert [int(r["size"]) for r in rows] == [8, 16, 32]
    for r in rows:
        assert float(r["gap"]) == pytest.approx(float(r["distilled"]) - float(r["plain"]), abs=2e-6)
    assert {"sweep_seeds.csv", "sweep.png", "teacher.ckpt", "config.json"} <= set(os.listdir(sweep_dir))


def test_sweep_reuses_teacher(tmp_path, sweep_dir):
    rc = cli.main(["sweep", "--sizes", "8", "--seeds", "1", "--student-epochs", "1", "--samples", "128",
                   "--val-samples", "16", "--teacher-ckpt", str(sweep_dir / "teacher.ckpt"), "--out", str(tmp_path)])
    assert rc == 0
    assert "teacher.ckpt" not in os.listdir(tmp_path)


# -- activation export ---------------------------------------------------------------------

def test_export_full_size_map(tmp_path):
    ckpt = tmp_path / "t.ckpt"
    save_checkpoint(str(ckpt), M.build_teacher(M.TEACHER, 4), {"seed": 0})
    img = tmp_path / "in.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (224, 224, 3), dtype=np.uint8)).save(img)
    out = tmp_path / "act"
    assert cli.main(["export-activations", "--ckpt", str(ckpt), "--image", str(img), "--out", str(out)]) == 0
    amap = X.read_map_csv(str(out / "activation.csv"))
    assert amap.shape == (28, 28)
    assert amap.min() == 0.0 and amap.max() == 1.0
    assert np.max(np.abs(X.read_pgm(str(out / "activation.pgm")) - amap)) <= 1 / 255
    assert (out / "activation.png").stat().st_size > 0


def test_constant_map_normalizes_to_zeros():
    np.testing.assert_array_equal(X.normalize_map(np.full((4, 4), 3.3)), np.zeros((4, 4)))


def test_map_csv_and_pgm_round_trip(tmp_path):
    amap = X.normalize_map(np.random.default_rng(1).random((7, 5)))
    X.write_map_csv(amap, str(tmp_path / "m.csv"))
    X.write_pgm(amap, str(tmp_path / "m.pgm"))
    csv_back = X.read_map_csv(str(tmp_path / "m.csv"))
    assert np.max(np.abs(csv_back - amap)) <= 5e-7
    pgm_back = X.read_pgm(str(tmp_path / "m.pgm"))
    assert pgm_back.shape == (7, 5) and np.max(np.abs(pgm_back - amap)) <= 0.5 / 255 + 1e-12


def test_plot_command(tmp_path, trained_teacher):
    out = tmp_path / "m.png"
    assert cli.main(["plot", str(trained_teacher / "metrics.txt"), "--out", str(out)]) == 0
    assert out.stat().st_size > 0
