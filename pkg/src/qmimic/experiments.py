"""Reference recipe and the multi-run drivers (stage runner, lambda sweep, quantization ablation)."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import data
from .mimic import LAMBDA_SWEEP, MimicConfig
from .nets import BackboneConfig
from .pipeline import (
    Checkpoint,
    TrainRun,
    evaluate,
    quantize_finetune,
    train_student,
    train_teacher,
)
from .quantize import QuantizationScheme, make_pow2, make_uniform

log = logging.getLogger(__name__)

METRIC_FIELDS = ("run_id", "stage", "seed", "lambda", "tq", "sq", "toy_ap", "mean_matching_ratio", "wall_time_s")
# stage -> (needs teacher, quantize teacher, quantize student, uses mimic weight)
STAGE_FLAGS = {
    "student-scratch": (False, False, False, False),
    "student-quant-only": (False, False, True, False),
    "student-mimic-only": (True, False, False, True),
    "student-qmimic": (True, True, True, True),
}


@dataclass(frozen=True)
class Recipe:
    """Every knob of one experiment; mirrors the flat config file."""

    image_size: int = 64
    num_train: int = 3000
    num_test: int = 500
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.15
    max_size: float = 0.4
    noise: float = 0.25
    data_seed: int = 1
    train_data: str | None = None
    test_data: str | None = None

    teacher_channels: tuple = (32, 64, 128)
    teacher_divisor: int = 1
    student_divisor: int = 8
    head_hidden: int = 128
    input_scale: float = 4.0
    roi_size: int = 3

    iterations: int = 1500
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_at: float = 0.75
    finetune_iterations: int = 300
    finetune_lr: float = 0.001
    proposals_per_object: int = 4
    jitter: float = 0.3
    eval_jitter: float = 0.3
    iou_threshold: float = 0.5

    lam: float = 1.0
    quant_kind: str = "uniform"
    quant_stride: float = 1.0
    quant_percentile: float = 99.0
    quant_max: float | None = None
    pow2_min: int = -2
    pow2_max: int = 3
    student_quant_max: float = 32.0
    match_threshold: float = 0.3
    grad_clip: float | None = 1.0

    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "teacher_channels", tuple(int(c) for c in self.teacher_channels))
        if self.quant_kind not in ("uniform", "pow2"):
            raise ValueError(f"quant_kind must be 'uniform' or 'pow2', got {self.quant_kind!r}")

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def backbone(self, divisor: int) -> BackboneConfig:
        return BackboneConfig(
            channels=self.teacher_channels,
            divisor=divisor,
            strides=(2,) * len(self.teacher_channels),
            head_hidden=self.head_hidden,
            input_scale=self.input_scale,
        )

    def dataset_spec(self, split: str) -> data.DatasetSpec:
        n = self.num_train if split == "train" else self.num_test
        offset = 0 if split == "train" else 1_000_003
        return data.DatasetSpec(
            image_size=self.image_size, num_images=n, min_objects=self.min_objects, max_objects=self.max_objects,
            min_size=self.min_size, max_size=self.max_size, noise=self.noise, seed=self.data_seed + offset,
        )

    def train_run(self, stage: str, seed: int, mimic: MimicConfig | None = None) -> TrainRun:
        finetune = stage == "quantize-finetune"
        run = TrainRun(
            stage=stage,
            iterations=self.finetune_iterations if finetune else self.iterations,
            batch_size=self.batch_size,
            lr=self.finetune_lr if finetune else self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_drop_at=self.lr_drop_at,
            seed=seed,
            proposals_per_object=self.proposals_per_object,
            jitter=self.jitter,
            quant_stride=self.quant_stride,
            quant_percentile=self.quant_percentile,
            grad_clip=self.grad_clip,
        )
        return replace(run, mimic=mimic) if mimic is not None else run


@lru_cache(maxsize=4)
def _generated(spec: data.DatasetSpec):
    return tuple(data.generate(spec))


def load_datasets(recipe: Recipe) -> tuple[list, list]:
    train = data.load(recipe.train_data) if recipe.train_data else list(_generated(recipe.dataset_spec("train")))
    test = data.load(recipe.test_data) if recipe.test_data else list(_generated(recipe.dataset_spec("test")))
    return train, test


def finetune_scheme(recipe: Recipe) -> QuantizationScheme | None:
    """Fixed scheme for the finetune stage, or None to calibrate from activations."""
    if recipe.quant_kind == "pow2":
        return make_pow2(recipe.pow2_min, recipe.pow2_max)
    if recipe.quant_max is not None:
        return make_uniform(recipe.quant_stride, recipe.quant_max)
    return None


def run_stage(recipe: Recipe, stage: str, seed: int, train, teacher: Checkpoint | None = None,
              lam: float | None = None) -> Checkpoint:
    """Train one stage. Student stages take their quantization flags from the stage name."""
    if stage == "teacher":
        return train_teacher(recipe.train_run(stage, seed), train, recipe.backbone(recipe.teacher_divisor), recipe.roi_size)
    if stage == "quantize-finetune":
        if teacher is None:
            raise ValueError("quantize-finetune needs a teacher checkpoint")
        return quantize_finetune(teacher, recipe.train_run(stage, seed), train, finetune_scheme(recipe))
    if stage not in STAGE_FLAGS:
        raise ValueError(f"unknown stage {stage!r}")
    needs_teacher, tq, sq, mimics = STAGE_FLAGS[stage]
    if needs_teacher and teacher is None:
        raise ValueError(f"{stage} needs a teacher checkpoint")
    if tq and teacher.scheme is None:
        raise ValueError(f"{stage} needs a quantized teacher (output of quantize-finetune)")
    scheme = student_scheme(recipe, teacher)
    weight = (recipe.lam if lam is None else lam) if mimics else 0.0
    mimic = MimicConfig(lam=weight, quantize_teacher=tq, quantize_student=sq, scheme=scheme,
                        match_threshold=recipe.match_threshold)
    return train_student(teacher if needs_teacher else None, recipe.train_run(stage, seed, mimic), train,
                         recipe.backbone(recipe.student_divisor), recipe.roi_size,
                         quantized_features=stage == "student-quant-only")


def student_scheme(recipe: Recipe, teacher: Checkpoint | None) -> QuantizationScheme:
    if teacher is not None and teacher.scheme is not None:
        return teacher.scheme
    if recipe.quant_kind == "pow2":
        return make_pow2(recipe.pow2_min, recipe.pow2_max)
    return make_uniform(recipe.quant_stride, recipe.quant_max if recipe.quant_max is not None else recipe.student_quant_max)


def metrics_row(recipe: Recipe, ckpt: Checkpoint, test, seed: int, wall: float, run_id: str,
                teacher: Checkpoint | None = None) -> dict:
    m = evaluate(ckpt, test, recipe.iou_threshold, teacher=teacher, proposals_per_object=recipe.proposals_per_object,
                 jitter=recipe.eval_jitter)
    mc = ckpt.mimic
    return {
        "run_id": run_id,
        "stage": ckpt.meta["stage"],
        "seed": seed,
        "lambda": mc.lam if mc else 0.0,
        "tq": int(bool(mc and mc.quantize_teacher)),
        "sq": int(bool(mc.quantize_student if mc else ckpt.meta["stage"] == "student-quant-only")),
        "toy_ap": m.toy_ap,
        "mean_matching_ratio": m.mean_matching_ratio if m.mean_matching_ratio is not None else "",
        "wall_time_s": round(wall, 3),
    }


def write_rows(path, rows, fieldnames=METRIC_FIELDS, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        if new:
            w.writeheader()
        w.writerows(rows)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TeacherPair:
    """Full-precision and quantize-finetuned teachers per seed, trained once."""

    def __init__(self, recipe: Recipe, train):
        self.recipe = recipe
        self.train = train
        self._cache: dict[int, tuple[Checkpoint, Checkpoint, float, float]] = {}

    def __call__(self, seed: int) -> tuple[Checkpoint, Checkpoint]:
        if seed not in self._cache:
            t0 = time.perf_counter()
            fp = run_stage(self.recipe, "teacher", seed, self.train)
            t1 = time.perf_counter()
            q = run_stage(self.recipe, "quantize-finetune", seed, self.train, teacher=fp)
            self._cache[seed] = (fp, q, t1 - t0, time.perf_counter() - t1)
        return self._cache[seed][:2]

    def times(self, seed: int) -> tuple[float, float]:
        return self._cache[seed][2:]


def _student(recipe, stage, seed, train, test, teachers: TeacherPair, lam=None, tag=""):
    fp, q = teachers(seed)
    teacher = {"student-mimic-only": fp, "student-qmimic": q}.get(stage)
    t0 = time.perf_counter()
    ckpt = run_stage(recipe, stage, seed, train, teacher=teacher, lam=lam)
    wall = time.perf_counter() - t0
    run_id = f"{stage}{tag}-s{seed}"
    log.info("finished %s in %.1fs", run_id, wall)
    return ckpt, metrics_row(recipe, ckpt, test, seed, wall, run_id, teacher=teacher)


def sweep_lambda(recipe: Recipe, values=LAMBDA_SWEEP, seeds=(0, 1, 2), datasets=None,
                 teachers: TeacherPair | None = None) -> tuple[list[dict], list[dict]]:
    """student-qmimic for every (lambda, seed); returns per-run rows and per-lambda aggregates."""
    train, test = datasets or load_datasets(recipe)
    teachers = teachers or TeacherPair(recipe, train)
    rows = []
    for lam in values:
        for seed in seeds:
            rows.append(_student(recipe, "student-qmimic", seed, train, test, teachers, lam=lam, tag=f"-lam{lam:g}")[1])
    return rows, aggregate_by_lambda(rows)


def aggregate_by_lambda(rows) -> list[dict]:
    out = []
    for lam in sorted({float(r["lambda"]) for r in rows}):
        ap = np.array([float(r["toy_ap"]) for r in rows if float(r["lambda"]) == lam])
        out.append({"lambda": lam, "runs": len(ap), "toy_ap_mean": float(ap.mean()), "toy_ap_std": float(ap.std(ddof=0))})
    return out


def ablate_quant(recipe: Recipe, seeds=(0, 1, 2), datasets=None, teachers: TeacherPair | None = None) -> list[dict]:
    """The {teacher-quant} x {student-quant} grid plus scratch, 5 rows per seed."""
    train, test = datasets or load_datasets(recipe)
    teachers = teachers or TeacherPair(recipe, train)
    rows = []
    for seed in seeds:
        fp, q = teachers(seed)
        rows.append(_student(recipe, "student-scratch", seed, train, test, teachers)[1])
        for tq in (False, True):
            for sq in (False, True):
                teacher = q if tq else fp
                mimic = MimicConfig(lam=recipe.lam, quantize_teacher=tq, quantize_student=sq,
                                    scheme=student_scheme(recipe, q if (tq or sq) else teacher),
                                    match_threshold=recipe.match_threshold)
                stage = {(False, False): "student-mimic-only", (True, True): "student-qmimic"}.get((tq, sq), "student-mimic")
                t0 = time.perf_counter()
                ckpt = train_student(teacher, recipe.train_run(stage, seed, mimic),
                                     train, recipe.backbone(recipe.student_divisor), recipe.roi_size)
                wall = time.perf_counter() - t0
                rows.append(metrics_row(recipe, ckpt, test, seed, wall, f"grid-tq{int(tq)}-sq{int(sq)}-s{seed}", teacher=teacher))
    return rows


def recipe_to_dict(recipe: Recipe) -> dict:
    d = asdict(recipe)
    d["teacher_channels"] = list(recipe.teacher_channels)
    return d
