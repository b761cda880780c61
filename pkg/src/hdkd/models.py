"""Teacher (pure CNN) and student (CNN + DFLT) assembly, model spec files and presets."""
from __future__ import annotations

import configparser
import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, MBBlock, Stem, StemConfig
from .dflt import DFLT, DfltConfig
from .nn import Linear, Module, ModuleList
from .tensor import Tensor

log = logging.getLogger(__name__)

TAP_SOURCES = ("block", "stem")


@dataclass(frozen=True)
class BackboneSpec:
    """Fields shared by the teacher and the student convolutional trunk."""

    blocks: tuple = (6, 6, 9)
    channels: tuple = (64, 128, 192)
    strides: tuple = (2, 1, 2)
    stem_stride: int = 2
    expansion: int = 4
    attention: str = "CBAM"
    ca_reduction: int = 32
    sa_kernel: int = 7
    image_size: int = 224
    in_channels: int = 3

    def validate(self) -> None:
        if not (len(self.blocks) == len(self.channels) == len(self.strides) == 3):
            raise ValueError("blocks, channels and strides need exactly three stages")
        if any(n < 1 for n in self.blocks):
            raise ValueError(f"every stage needs at least one block: {self.blocks}")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"stage strides must be 1 or 2: {self.strides}")
        StemConfig(self.in_channels, self.channels[0], 3, self.stem_stride)
        if self.image_size % self.stem_stride:
            raise ValueError(f"image size {self.image_size} not divisible by stem stride {self.stem_stride}")

    def tap_shapes(self, image_hw=None) -> list:
        """(C, H, W) after each of the three stages."""
        h, w = image_hw or (self.image_size, self.image_size)
        h, w = h // self.stem_stride, w // self.stem_stride
        shapes = []
        for c, s in zip(self.channels, self.strides):
            h, w = T.conv_out_extent(h, 3, s, 1), T.conv_out_extent(w, 3, s, 1)
            shapes.append((c, h, w))
        return shapes

    def stem_shape(self, image_hw=None) -> tuple:
        h, w = image_hw or (self.image_size, self.image_size)
        return (self.channels[0], h // self.stem_stride, w // self.stem_stride)


@dataclass(frozen=True)
class TeacherSpec(BackboneSpec):
    head_layers: int = 1


@dataclass(frozen=True)
class StudentSpec(BackboneSpec):
    blocks: tuple = (2, 2, 3)
    dflt: DfltConfig = field(default_factory=DfltConfig)
    stage1_tap: str = "block"

    @property
    def distill_token(self) -> bool:
        return self.dflt.distill_token

    def with_distill(self, on: bool) -> "StudentSpec":
        return replace(self, dflt=replace(self.dflt, distill_token=on))

    def validate(self) -> None:
        super().validate()
        if self.stage1_tap not in TAP_SOURCES:
            raise ValueError(f"stage1_tap must be one of {TAP_SOURCES}")
        _, h, w = self.tap_shapes()[-1]
        self.dflt.n_patches(h, w)


def student_tap_shapes(spec: BackboneSpec, image_hw=None, stage1_tap: str = "block") -> list:
    shapes = spec.tap_shapes(image_hw)
    if stage1_tap == "stem":
        shapes[0] = spec.stem_shape(image_hw)
    return shapes


def validate_pair(teacher: TeacherSpec, student: StudentSpec) -> None:
    """Check the shared-hierarchy contract and that the teacher is deeper at every stage."""
    teacher.validate()
    student.validate()
    for i, (n, m) in enumerate(zip(teacher.blocks, student.blocks), 1):
        if not n > m:
            raise ValueError(f"stage {i}: teacher blocks ({n}) must exceed student blocks ({m})")
    shared = ("channels", "strides", "stem_stride", "expansion", "attention", "ca_reduction", "sa_kernel",
              "image_size", "in_channels")
    for name in shared:
        if getattr(teacher, name) != getattr(student, name):
            raise ValueError(f"teacher and student disagree on shared field {name!r}")
    t_taps = student_tap_shapes(teacher, stage1_tap=student.stage1_tap)
    s_taps = student_tap_shapes(student, stage1_tap=student.stage1_tap)
    if t_taps != s_taps:
        raise ValueError(f"tap shapes differ: teacher {t_taps} vs student {s_taps}")


@dataclass
class TeacherOutput:
    logits: Tensor
    features: list


@dataclass
class StudentOutput:
    cls_logits: Tensor
    distill_logits: Tensor | None
    features: list


def _build_trunk(spec: BackboneSpec, rng: np.random.Generator):
    stem = Stem(StemConfig(spec.in_channels, spec.channels[0], 3, spec.stem_stride), rng)
    stages = ModuleList()
    cin = spec.channels[0]
    for n, c, s in zip(spec.blocks, spec.channels, spec.strides):
        stage = ModuleList()
        for b in range(n):
            cfg = BlockConfig(cin, c, s if b == 0 else 1, spec.expansion, spec.attention, spec.ca_reduction,
                              spec.sa_kernel)
            stage.append(MBBlock(cfg, rng))
            cin = c
        stages.append(stage)
    return stem, stages


def _run_trunk(model, x: Tensor, stage1_tap: str):
    h = model.stem(x)
    feats = []
    if stage1_tap == "stem":
        feats.append(h)
    for i, stage in enumerate(model.stages):
        for block in stage:
            h = block(h)
        if i > 0 or stage1_tap == "block":
            feats.append(h)
    return h, feats


def _check_taps(feats, expected, who):
    for j, (f, e) in enumerate(zip(feats, expected), 1):
        if tuple(f.shape[1:]) != tuple(e):
            raise ValueError(f"{who} stage {j} tap has shape {f.shape[1:]}, expected {e}")


class Teacher(Module):
    """Stem -> three MB stages -> global average pool -> linear head."""

    def __init__(self, spec: TeacherSpec, num_classes: int, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec, self.num_classes = spec, num_classes
        rng = np.random.default_rng(seed)
        self.stem, self.stages = _build_trunk(spec, rng)
        self.head = Linear(spec.channels[-1], num_classes, rng)
        self.tap_source = "block"

    def forward(self, x: Tensor) -> TeacherOutput:
        h, feats = _run_trunk(self, x, self.tap_source)
        _check_taps(feats, student_tap_shapes(self.spec, x.shape[2:], self.tap_source), "teacher")
        pooled = T.pool(h, "avg", "global-spatial").reshape(h.shape[0], h.shape[1])
        return TeacherOutput(self.head(pooled), feats)

    def stage3_output(self, x: Tensor) -> Tensor:
        return _run_trunk(self, x, "block")[0]


class Student(Module):
    """Stem -> three MB stages shared in shape with the teacher -> DFLT."""

    def __init__(self, spec: StudentSpec, num_classes: int, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec, self.num_classes = spec, num_classes
        rng = np.random.default_rng(seed)
        self.stem, self.stages = _build_trunk(spec, rng)
        c3, h3, w3 = spec.tap_shapes()[-1]
        self.dflt = DFLT(c3, (h3, w3), num_classes, spec.dflt, rng)

    @property
    def distill_token(self) -> bool:
        return self.spec.distill_token

    def forward(self, x: Tensor) -> StudentOutput:
        h, feats = _run_trunk(self, x, self.spec.stage1_tap)
        _check_taps(feats, student_tap_shapes(self.spec, x.shape[2:], self.spec.stage1_tap), "student")
        cls_logits, distill_logits = self.dflt(h)
        return StudentOutput(cls_logits, distill_logits, feats)

    def stage3_output(self, x: Tensor) -> Tensor:
        return _run_trunk(self, x, "block")[0]


def build_teacher(spec: TeacherSpec, num_classes: int, seed: int = 0) -> Teacher:
    return Teacher(spec, num_classes, seed)


def build_student(spec: StudentSpec, num_classes: int, seed: int = 0) -> Student:
    return Student(spec, num_classes, seed)


def teacher_forward(model: Teacher, x: Tensor) -> TeacherOutput:
    return model(x)


def student_forward(model: Student, x: Tensor) -> StudentOutput:
    return model(x)


def inference_logits(out: StudentOutput) -> Tensor:
    if out.distill_logits is None:
        return out.cls_logits
    return (out.cls_logits + out.distill_logits) * 0.5


def predict(model, x: Tensor) -> np.ndarray:
    """Class probabilities; distilled students average CLS and distillation logits."""
    with T.no_grad():
        out = model(x)
    if isinstance(out, TeacherOutput):
        logits = out.logits
    else:
        if out.distill_logits is None:
            log.info("student has no distillation head; predicting from CLS logits only")
        logits = inference_logits(out)
    return T.softmax(logits, axis=-1).data


# -- spec files --------------------------------------------------------------

def _tuple(s: str) -> tuple:
    return tuple(int(v) for v in s.replace("(", "").replace(")", "").split(",") if v.strip())


def parse_spec(text: str):
    """Parse a model spec (INI style: ``[model]``, ``[stageN]``, ``[dflt]`` sections)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    m = cp["model"]
    kind = m.get("kind", "teacher")
    stages = sorted((s for s in cp.sections() if s.startswith("stage")), key=lambda s: int(s[5:]))
    if len(stages) != 3:
        raise ValueError(f"spec needs sections stage1..stage3, found {stages}")
    common = dict(
        blocks=tuple(cp[s].getint("blocks") for s in stages),
        channels=tuple(cp[s].getint("channels") for s in stages),
        strides=tuple(cp[s].getint("stride") for s in stages),
        stem_stride=m.getint("stem_stride", 2),
        expansion=m.getint("expansion", 4),
        attention=m.get("attention", "CBAM"),
        ca_reduction=m.getint("ca_reduction", 32),
        sa_kernel=m.getint("sa_kernel", 7),
        image_size=m.getint("image_size", 224),
        in_channels=m.getint("in_channels", 3),
    )
    if kind == "teacher":
        return TeacherSpec(**common, head_layers=m.getint("head_layers", 1))
    if kind != "student":
        raise ValueError(f"unknown model kind {kind!r}")
    d = cp["dflt"] if cp.has_section("dflt") else {}
    get = (lambda k, dflt: d.get(k, dflt)) if isinstance(d, dict) else (lambda k, dflt: d.get(k, str(dflt)))
    dcfg = DfltConfig(
        layers=int(get("layers", 3)),
        patch=_tuple(get("patch", "2,2")),
        embed_dim=int(get("embed_dim", 256)),
        heads=int(get("heads", 8)),
        head_dim=int(get("head_dim", 32)),
        mlp_ratio=int(get("mlp_ratio", 4)),
        distill_token=str(get("distill_token", "true")).lower() in ("1", "true", "yes", "on"),
    )
    return StudentSpec(**common, dflt=dcfg, stage1_tap=m.get("stage1_tap", "block"))


def format_spec(spec) -> str:
    kind = "student" if isinstance(spec, StudentSpec) else "teacher"
    lines = ["[model]", f"kind = {kind}", f"stem_stride = {spec.stem_stride}", f"expansion = {spec.expansion}",
             f"attention = {spec.attention}", f"ca_reduction = {spec.ca_reduction}", f"sa_kernel = {spec.sa_kernel}",
             f"image_size = {spec.image_size}", f"in_channels = {spec.in_channels}"]
    if kind == "teacher":
        lines.append(f"head_layers = {spec.head_layers}")
    else:
        lines.append(f"stage1_tap = {spec.stage1_tap}")
    for i, (n, c, s) in enumerate(zip(spec.blocks, spec.channels, spec.strides), 1):
        lines += ["", f"[stage{i}]", f"blocks = {n}", f"channels = {c}", f"stride = {s}"]
    if kind == "student":
        d = spec.dflt
        lines += ["", "[dflt]", f"layers = {d.layers}", f"patch = {d.patch[0]},{d.patch[1]}",
                  f"embed_dim = {d.embed_dim}", f"heads = {d.heads}", f"head_dim = {d.head_dim}",
                  f"mlp_ratio = {d.mlp_ratio}", f"distill_token = {str(d.distill_token).lower()}"]
    return "\n".join(lines) + "\n"


def spec_hash(spec) -> str:
    return hashlib.sha256(format_spec(spec).encode()).hexdigest()[:16]


def load_spec(path_or_preset: str):
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]
    with open(path_or_preset) as fh:
        return parse_spec(fh.read())


TEACHER = TeacherSpec()
STUDENT = StudentSpec(dflt=DfltConfig(distill_token=False))
HDKD = StudentSpec()

DESK_CHANNELS = (16, 32, 48)
DESK_DFLT = DfltConfig(layers=2, embed_dim=64, heads=2, head_dim=32)
DESK_TEACHER = TeacherSpec(blocks=(2, 2, 3), channels=DESK_CHANNELS, image_size=64)
DESK_STUDENT = StudentSpec(blocks=(1, 1, 1), channels=DESK_CHANNELS, image_size=64, dflt=DESK_DFLT)

PRESETS = {
    "teacher": TEACHER,
    "student": STUDENT,
    "hdkd": HDKD,
    "desk-teacher": DESK_TEACHER,
    "desk-student": DESK_STUDENT,
}
