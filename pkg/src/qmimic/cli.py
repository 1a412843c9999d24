"""Command-line entry point: dataset generation, training stages, evaluation and report drivers.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 training produced a non-finite value, 5 shape mismatch.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import yaml

from . import analysis, data, experiments
from .mimic import LAMBDA_SWEEP, ratio_histogram
from .numcore import NonFiniteError, ShapeError
from .pipeline import (
    STAGES,
    CheckpointError,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("qmimic")

EXIT_CONFIG, EXIT_IO, EXIT_NAN, EXIT_SHAPE = 2, 3, 4, 5
_PATH_KEYS = ("train_data", "test_data", "out_dir")
TRAIN_STAGES = ("teacher", "quantize-finetune", *experiments.STAGE_FLAGS)


class ConfigError(ValueError):
    pass


def _read_yaml(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    return doc


def _check_keys(doc: dict, allowed, path) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, {', '.join(nested)} is a mapping")


def load_recipe(path) -> experiments.Recipe:
    """Read a flat YAML config; relative paths are resolved against the config's directory."""
    path = Path(path)
    doc = _read_yaml(path)
    _check_keys(doc, experiments.Recipe.keys(), path)
    for key in _PATH_KEYS:
        if doc.get(key) is not None:
            doc[key] = str((path.parent / doc[key]).resolve())
    if "out_dir" not in doc:
        doc["out_dir"] = str((path.parent / experiments.Recipe.out_dir).resolve())
    try:
        return experiments.Recipe(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_dataset_spec(path) -> data.DatasetSpec:
    doc = _read_yaml(path)
    _check_keys(doc, [f.name for f in fields(data.DatasetSpec)], path)
    try:
        return data.DatasetSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    spec = load_dataset_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.save(data.generate(spec), args.out)
    log.info("wrote %d images to %s", spec.num_images, args.out)


def cmd_train(args) -> None:
    recipe = load_recipe(args.config)
    seed = recipe.seed if args.seed is None else args.seed
    needs_teacher = args.stage == "quantize-finetune" or experiments.STAGE_FLAGS.get(args.stage, (False,))[0]
    if needs_teacher and not args.teacher:
        raise ConfigError(f"stage {args.stage} needs --teacher")
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    train, test = experiments.load_datasets(recipe)
    t0 = time.perf_counter()
    ckpt = experiments.run_stage(recipe, args.stage, seed, train, teacher=teacher if needs_teacher else None)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    row = experiments.metrics_row(recipe, ckpt, test, seed, wall, f"{args.stage}-s{seed}",
                                  teacher=teacher if ckpt.mimic is not None else None)
    metrics = Path(args.metrics_csv) if args.metrics_csv else out.with_suffix(".metrics.csv")
    experiments.write_rows(metrics, [row], append=args.append)
    log.info("toy_ap=%.4f checkpoint=%s metrics=%s", row["toy_ap"], out, metrics)


def cmd_eval(args) -> None:
    model = load_checkpoint(args.model)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    samples = data.load(args.data)
    if teacher is not None and model.mimic is None:
        raise ConfigError("--teacher given but the model was not trained with a mimic adapter")
    m = evaluate(model, samples, args.iou_threshold, teacher=teacher, quantized_inference=args.quantized_inference,
                 proposals_per_object=args.proposals_per_object, jitter=args.jitter)
    out = Path(args.out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "images", "toy_ap", "roi_accuracy", "mean_matching_ratio"])
        mm = "" if m.mean_matching_ratio is None else repr(m.mean_matching_ratio)
        w.writerow([Path(args.model).name, len(samples), repr(m.toy_ap), repr(m.roi_accuracy), mm])
    if teacher is not None:
        hist = Path(args.hist_csv) if args.hist_csv else out.with_name(out.stem + "_hist.csv")
        ratio_histogram(m.matching_ratios, args.bins).to_csv(hist)
        log.info("matching-ratio histogram written to %s", hist)
    log.info("toy_ap=%.4f", m.toy_ap)


def _seeds(args, recipe) -> tuple[int, ...]:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    base = recipe.seed if args.seed is None else args.seed
    return tuple(range(base, base + args.seeds))


def _parse_values(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values or any(v < 0 for v in values):
        raise ConfigError("--values needs one or more non-negative numbers")
    return values


def cmd_sweep_lambda(args) -> None:
    recipe = load_recipe(args.config)
    rows, agg = experiments.sweep_lambda(recipe, _parse_values(args.values), _seeds(args, recipe))
    out = Path(args.out_csv) if args.out_csv else Path(recipe.out_dir) / "sweep_lambda.csv"
    experiments.write_rows(out, agg, fieldnames=("lambda", "runs", "toy_ap_mean", "toy_ap_std"))
    experiments.write_rows(out.with_name(out.stem + "_runs.csv"), rows)
    log.info("lambda sweep aggregate written to %s", out)


def cmd_ablate_quant(args) -> None:
    recipe = load_recipe(args.config)
    rows = experiments.ablate_quant(recipe, _seeds(args, recipe))
    out = Path(args.out_csv) if args.out_csv else Path(recipe.out_dir) / "ablate_quant.csv"
    experiments.write_rows(out, rows)
    log.info("quantization grid written to %s", out)


def cmd_analyze_cubes(args) -> None:
    try:
        dictionary = tuple(float(v) for v in args.dict.split(","))
    except ValueError as exc:
        raise ConfigError(f"--dict: {exc}") from exc
    try:
        report = analysis.matching_relaxation_report(args.trials, args.d, args.k, dictionary, seed=args.seed,
                                                     samples=args.samples)
    except (ValueError, OverflowError) as exc:
        raise ConfigError(str(exc)) from exc
    Path(args.out_csv).parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out_csv)
    log.info("strict=%.4f relaxed=%.4f over %d trials", report.mean_strict, report.mean_relaxed, args.trials)


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmimic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic detection dataset file")
    g.add_argument("--spec", required=True, help="YAML file with DatasetSpec fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override the spec's seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=TRAIN_STAGES)
    t.add_argument("--config", required=True)
    t.add_argument("--teacher", help="teacher checkpoint (finetune and mimic stages)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics-csv", help="defaults to <out>.metrics.csv")
    t.add_argument("--append", action="store_true", help="append the metrics row instead of overwriting")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--teacher")
    e.add_argument("--out-csv", required=True)
    e.add_argument("--hist-csv", help="defaults to <out-csv stem>_hist.csv")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--iou-threshold", type=float, default=0.5)
    e.add_argument("--proposals-per-object", type=int, default=4)
    e.add_argument("--jitter", type=float, default=0.3)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--quantized-inference", dest="quantized_inference", action="store_const", const=True,
                      help="force a quantized feature map")
    mode.add_argument("--float-inference", dest="quantized_inference", action="store_const", const=False,
                      help="force a full-precision feature map")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-lambda", help="student-qmimic over mimic weights and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--values", default=",".join(f"{v:g}" for v in LAMBDA_SWEEP))
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--seed", type=int, help="first seed (default: config seed)")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_sweep_lambda)

    a = sub.add_parser("ablate-quant", help="teacher/student quantization grid plus scratch")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--seed", type=int, help="first seed (default: config seed)")
    a.add_argument("--out-csv")
    a.set_defaults(func=cmd_ablate_quant)

    c = sub.add_parser("analyze-cubes", help="strict vs relaxed matching of random manifolds")
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--dict", required=True, help="comma-separated dictionary entries")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--samples", type=int, default=5000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-csv", required=True)
    c.set_defaults(func=cmd_analyze_cubes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ShapeError as exc:
        log.error("shape mismatch: %s", exc)
        return EXIT_SHAPE
    except (TrainingDiverged, NonFiniteError) as exc:
        log.error("aborted: %s", exc)
        return EXIT_NAN
    except (OSError, data.DatasetFormatError, CheckpointError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
