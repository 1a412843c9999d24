"""Acceptance criteria A1-A10. Each test records a PASS/FAIL line shown in the terminal summary."""

import csv
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml

from qmimic import analysis
from qmimic import data
from qmimic import experiments as E
from qmimic import numcore as nc
from qmimic.cli import main
from qmimic.mimic import MimicConfig, mimic_loss
from qmimic.nets import Adapter, roi_max_pool
from qmimic.pipeline import evaluate, load_checkpoint, save_checkpoint, train_student
from qmimic.quantize import make_explicit, make_pow2, make_uniform, quantize, quantized_relu
from helpers import check_grads, random_fm
from oracles import mimic_loss_loop
from verdicts import record

SEEDS = (0, 1, 2)
REFERENCE = E.Recipe()


# --- A1 ----------------------------------------------------------------------


def test_a1_quantizer_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    schemes = {f"uniform s={s:g}": make_uniform(s, 16 * s) for s in (0.5, 1, 8)}
    schemes["pow2"] = make_pow2(-2, 3)
    schemes["explicit {1,3}"] = make_explicit((1, 3))
    failures = []
    for name, scheme in schemes.items():
        top = scheme.entries[-1]
        x = rng.uniform(0, 1.5 * top, 100_000)
        q = quantize(x, scheme)
        if not np.array_equal(quantize(q, scheme), q):
            failures.append(f"{name}: idempotence")
        if not np.isin(q, scheme.entries).all():
            failures.append(f"{name}: membership")
        order = np.argsort(x)
        if np.any(np.diff(q[order]) < 0):
            failures.append(f"{name}: monotonicity")
        if scheme.kind == "uniform":
            s = scheme.params["stride"]
            interior = x <= top
            if np.max(np.abs(q[interior] - x[interior])) > s / 2:
                failures.append(f"{name}: |Q(x)-x| > s/2")
    wall = time.perf_counter() - t0
    ok = not failures and wall < 5
    record("A1", ok, f"{len(schemes)} schemes x 1e5 inputs in {wall:.2f}s {failures or ''}")
    assert ok, failures


# --- A2 ----------------------------------------------------------------------


def _grad_cases(rng):
    rois = lambda: np.array([[0.3, 0.2, 5.1, 4.7, 0], [1.0, 2.0, 4.0, 5.5, 1], [0, 0, 6, 6, 1]])
    x2 = lambda: rng.normal(size=(4, 5))
    # values kept away from kinks (relu at 0, smooth-L1 at |d| = 1)
    away = lambda shape: rng.choice([-1, 1], size=shape) * rng.uniform(0.1, 2, size=shape)
    return {
        "conv2d": (lambda x, w, b: nc.sum_squares(nc.conv2d(x, w, b, stride=2, pad=1)),
                   {"x": rng.normal(size=(2, 2, 5, 5)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}),
        "linear": (lambda x, w, b: nc.sum_squares(nc.linear(x, w, b)),
                   {"x": x2(), "w": rng.normal(size=(3, 5)), "b": rng.normal(size=3)}),
        "relu": (lambda x: nc.sum_squares(nc.relu(x)), {"x": away((3, 4))}),
        "roi_max_pool": (lambda fm: nc.sum_squares(roi_max_pool(fm, rois(), 2)), {"fm": random_fm(rng, 2, 2, 6, 6)}),
        "softmax_ce": (lambda z: nc.softmax_cross_entropy(z, rng_labels), {"z": rng.normal(size=(6, 4))}),
        "smooth_l1": (lambda p: nc.smooth_l1(p, np.zeros((5, 4))),
                      {"p": away((5, 4)) * np.where(rng.random((5, 4)) < 0.5, 0.4, 1.6)}),
        "adapter": (_adapter_build, {"x": rng.normal(size=(2, 3, 4, 4)), "w": rng.normal(size=(5, 3, 1, 1)),
                                    "b": rng.normal(size=5)}),
        "mimic_loss": (lambda s: mimic_loss(teacher_rois, s, MimicConfig(quantize_teacher=False, quantize_student=False)),
                       {"s": rng.normal(size=(4, 3, 3, 3))}),
    }


def _adapter_build(x, w, b):
    a = Adapter(3, 5, dtype=np.float64)
    a.params = {"adapter.weight": w, "adapter.bias": b}
    return nc.sum_squares(a(x))


rng_labels = np.array([0, 1, 2, 3, 1, 0])
teacher_rois = np.random.default_rng(99).uniform(0, 3, (4, 3, 3, 3))


def test_a2_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for instance in range(5):
        rng = np.random.default_rng([2, instance])
        for name, (build, arrays) in _grad_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_grads(build, arrays))
    wall = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    ok = not bad and wall < 60
    record("A2", ok, f"{len(worst)} ops x 5 instances, worst rel err {max(worst.values()):.1e}, {wall:.1f}s {bad or ''}")
    assert ok, bad


# --- A3 ----------------------------------------------------------------------


def test_a3_straight_through_contract():
    scheme = make_uniform(1.0, 8.0)
    rng = np.random.default_rng(3)
    e = np.asarray(scheme.entries)
    special = np.concatenate([e, (e[:-1] + e[1:]) / 2, -e, [0.0]])
    x = np.concatenate([rng.uniform(-4, 12, 10_000 - len(special)), special]).reshape(1, -1)
    upstream = rng.normal(size=(1, x.shape[1]))

    def grad(op):
        p = nc.parameter(x.copy())
        nc.backward(nc.total(nc.linear(op(p), nc.constant(upstream), nc.constant(np.zeros(1)))))
        return p.grad

    ste, plain = grad(lambda p: quantized_relu(p, scheme)), grad(nc.relu)
    ok = np.array_equal(ste, plain)
    record("A3", ok, f"{x.shape[1]} points, max |diff| {np.max(np.abs(ste - plain)):.1e}")
    assert ok


# --- A4 ----------------------------------------------------------------------


def test_a4_mimic_loss_oracle():
    scheme = make_uniform(1.0, 4.0)
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng([4, i])
        r, c = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        t = rng.uniform(0, 5, (r, c, 3, 3))
        s = rng.uniform(-1, 5, (r, c, 3, 3))
        for tq in (False, True):
            for sq in (False, True):
                cfg = MimicConfig(lam=1.0, quantize_teacher=tq, quantize_student=sq, scheme=scheme)
                got = float(mimic_loss(t, nc.constant(s), cfg).value)
                want = mimic_loss_loop(t.tolist(), s.tolist(), scheme.entries, tq, sq)
                worst = max(worst, abs(got - want))
    ok = worst <= 1e-6
    record("A4", ok, f"50 instances x 4 flag combinations, max |module - oracle| {worst:.1e}")
    assert ok


# --- A5 ----------------------------------------------------------------------


def test_a5_cube_geometry():
    cells = analysis.cell_count(3, (1, 3))
    point = analysis.quantize_point([1.2, 2.2, 1.8], (1, 3)).tolist()
    report = analysis.matching_relaxation_report(1000, 3, 1, (1, 3), seed=5)
    relaxed_ok = all(t.relaxed_fraction >= t.strict_match for t in report.trials)
    ok = cells == 8 and point == [1, 3, 1] and relaxed_ok and len(report.trials) == 1000
    record("A5", ok, f"cells={cells}, Q([1.2,2.2,1.8])={point}, relaxed>=strict on all 1000 trials: {relaxed_ok} "
                     f"(mean strict {report.mean_strict:.3f}, relaxed {report.mean_relaxed:.3f})")
    assert ok


# --- reference runs shared by A6-A9 ----------------------------------------------


@pytest.fixture(scope="session")
def reference():
    t0 = time.perf_counter()
    train, test = E.load_datasets(REFERENCE)
    teachers = E.TeacherPair(REFERENCE, train)
    rows = {}
    for seed in SEEDS:
        for stage in ("student-scratch", "student-mimic-only", "student-qmimic"):
            rows[stage, seed] = E._student(REFERENCE, stage, seed, train, test, teachers)[1]
    a6_wall = time.perf_counter() - t0
    for seed in SEEDS:
        rows["student-quant-only", seed] = E._student(REFERENCE, "student-quant-only", seed, train, test, teachers)[1]
    return {"train": train, "test": test, "teachers": teachers, "rows": rows, "a6_wall": a6_wall}


def _mean(ref, stage, key="toy_ap"):
    return float(np.mean([float(ref["rows"][stage, s][key]) for s in SEEDS]))


def test_a6_trend_reproduction(reference):
    scratch, mimic, qmimic = (_mean(reference, s) for s in ("student-scratch", "student-mimic-only", "student-qmimic"))
    mr_mimic = _mean(reference, "student-mimic-only", "mean_matching_ratio")
    mr_qmimic = _mean(reference, "student-qmimic", "mean_matching_ratio")
    ordering = qmimic > mimic > scratch and qmimic - mimic >= 0.02
    ratio = mr_qmimic > mr_mimic
    fast = reference["a6_wall"] < 1800
    ok = ordering and ratio and fast
    record("A6", ok, f"toy-AP qmimic {qmimic:.4f} / mimic-only {mimic:.4f} / scratch {scratch:.4f} (ordering {ordering}); "
                     f"matching ratio qmimic {mr_qmimic:.4f} vs mimic-only {mr_mimic:.4f} ({ratio}); "
                     f"{reference['a6_wall']:.0f}s")
    assert ordering, "toy-AP ordering qmimic > mimic-only > scratch (margin 0.02) not reproduced"
    assert ratio
    assert fast


def test_a7_teacher_parity(reference):
    gaps = []
    for seed in SEEDS:
        fp, q = reference["teachers"](seed)
        gaps.append(evaluate(fp, reference["test"]).toy_ap - evaluate(q, reference["test"]).toy_ap)
    fp_ap = [evaluate(reference["teachers"](s)[0], reference["test"]).toy_ap for s in SEEDS]
    gap = float(np.mean(gaps))
    ok = abs(gap) <= 0.05
    record("A7", ok, f"full-precision teacher {np.mean(fp_ap):.4f}, quantized teacher {np.mean(fp_ap) - gap:.4f}, "
                     f"mean gap {gap:+.4f}")
    assert ok


def test_a8_lambda_sweep(reference, tmp_path):
    rows, agg = E.sweep_lambda(REFERENCE, (0.1, 1.0, 10.0), SEEDS, datasets=(reference["train"], reference["test"]),
                               teachers=reference["teachers"])
    out = tmp_path / "sweep_lambda.csv"
    E.write_rows(out, agg, fieldnames=("lambda", "runs", "toy_ap_mean", "toy_ap_std"))
    written = E.read_rows(out)
    means = {float(r["lambda"]): float(r["toy_ap_mean"]) for r in written}
    complete = sorted(means) == [0.1, 1.0, 10.0] and all(r["runs"] == "3" for r in written) and len(rows) == 9
    reproduced = means[1.0] >= means[0.1] and means[1.0] >= means[10.0]
    record("A8", complete, "sweep complete; mean toy-AP " + ", ".join(f"lambda={k:g}: {v:.4f}" for k, v in means.items())
           + f"; lambda=1 best: {'reproduced' if reproduced else 'not reproduced'}")
    assert complete


def test_a9_reduction_identities(reference):
    short = replace(REFERENCE, iterations=100)
    train = reference["train"][:400]
    scratch = E.run_stage(short, "student-scratch", 0, train)
    off = MimicConfig(lam=0.0, quantize_teacher=False, quantize_student=False)
    reduced = train_student(None, short.train_run("student-mimic-only", 0, off), train,
                            short.backbone(short.student_divisor), short.roi_size)
    identical = [h["loss"] for h in scratch.history] == [h["loss"] for h in reduced.history]
    delta = _mean(reference, "student-quant-only") - _mean(reference, "student-scratch")
    ok = identical and abs(delta) < 0.03
    record("A9", ok, f"lambda=0 trajectory bit-identical: {identical}; quant-only minus scratch toy-AP {delta:+.4f}")
    assert identical
    assert abs(delta) < 0.03


# --- A10 ---------------------------------------------------------------------


TINY = {"image_size": 32, "num_train": 24, "num_test": 8, "teacher_channels": [4, 8, 8], "head_hidden": 16,
        "student_divisor": 2, "iterations": 10, "finetune_iterations": 5, "batch_size": 4}


def _metric_values(path):
    with open(path, newline="") as fh:
        return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in csv.DictReader(fh)]


def _run_all_commands(root):
    root.mkdir()
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump({"image_size": 32, "num_images": 6, "seed": 2}))
    commands = [
        ["gen-data", "--spec", spec, "--out", root / "d.qmds"],
        ["train", "--stage", "teacher", "--config", cfg, "--out", root / "t.ckpt"],
        ["train", "--stage", "quantize-finetune", "--config", cfg, "--teacher", root / "t.ckpt", "--out", root / "q.ckpt"],
        ["train", "--stage", "student-scratch", "--config", cfg, "--out", root / "s0.ckpt"],
        ["train", "--stage", "student-mimic-only", "--config", cfg, "--teacher", root / "t.ckpt", "--out", root / "s1.ckpt"],
        ["train", "--stage", "student-qmimic", "--config", cfg, "--teacher", root / "q.ckpt", "--out", root / "s2.ckpt"],
        ["eval", "--model", root / "s2.ckpt", "--data", root / "d.qmds", "--teacher", root / "q.ckpt",
         "--out-csv", root / "eval.csv"],
        ["sweep-lambda", "--config", cfg, "--values", "0.1,1", "--seeds", "2", "--out-csv", root / "sweep.csv"],
        ["ablate-quant", "--config", cfg, "--seeds", "1", "--out-csv", root / "grid.csv"],
        ["analyze-cubes", "--d", "3", "--k", "1", "--dict", "1,3", "--trials", "5", "--out-csv", root / "cubes.csv"],
    ]
    codes = [main([str(a) for a in cmd]) for cmd in commands]
    return codes


def test_a10_determinism_and_persistence(tmp_path):
    codes_a = _run_all_commands(tmp_path / "a")
    codes_b = _run_all_commands(tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    same_bytes = all((a / f).read_bytes() == (b / f).read_bytes()
                     for f in ("d.qmds", "t.ckpt", "q.ckpt", "s0.ckpt", "s1.ckpt", "s2.ckpt"))
    csvs = sorted(p.name for p in a.glob("*.csv"))
    same_metrics = all(_metric_values(a / f) == _metric_values(b / f) for f in csvs)
    samples = data.load(a / "d.qmds")
    data.save(samples, tmp_path / "d2.qmds")
    ckpt = load_checkpoint(a / "s2.ckpt")
    save_checkpoint(ckpt, tmp_path / "s2b.ckpt")
    round_trip = ((tmp_path / "d2.qmds").read_bytes() == (a / "d.qmds").read_bytes()
                  and (tmp_path / "s2b.ckpt").read_bytes() == (a / "s2.ckpt").read_bytes())
    ok = codes_a == codes_b == [0] * len(codes_a) and same_bytes and same_metrics and round_trip
    record("A10", ok, f"{len(codes_a)} commands rerun: exit codes {set(codes_a)}, identical bytes {same_bytes}, "
                      f"identical metrics in {len(csvs)} CSVs {same_metrics}, round-trip {round_trip}")
    assert ok
