"""Command-line entry point: ``softsample <command> ...``.

Every command writes a ``*.manifest.json`` (or ``manifest.json`` inside an
output directory) before its outputs. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import tempfile
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .curation import (
    CurationError,
    Dataset,
    DatasetFormatError,
    dataset_to_json,
    drop_annotations,
    load_dataset,
    overlap_risk_histogram,
    voc_to_dataset,
)
from .evaluation import (
    AP_MODES,
    detections_from_json,
    fmt,
    reports_to_csv,
    reports_to_json,
    threshold_sweep,
)
from .sampling import (
    AssignmentConfig,
    GompertzParams,
    MissingThresholdError,
    assign_labels,
    overlap_soft_weights,
    per_class_thresholds,
    score_soft_weights,
    upper_bound_ignore_mask,
)
from .simlab.detector import TrainConfig, TrainingDivergedError
from .simlab.experiment import (
    DEFAULT_DROP_RATES,
    STRATEGIES,
    ExperimentSpec,
    default_grid,
    results_sd_csv,
    results_table_csv,
    run_strategy_comparison,
)
from .simlab.scenes import SceneConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

WEIGH_STRATEGIES = ("baseline", "hard-negative", "oss", "score-ss", "upper-bound")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# output plumbing


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seeds: Sequence[int], inputs: Sequence) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
    }
    write_atomic(path, dump_json(manifest))


def manifest_path(out: Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}")


def _load(path) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}")


def _output_format(path: Path, explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    return "csv" if Path(path).suffix.lower() == ".csv" else "json"


# --------------------------------------------------------------------------
# curate


def cmd_curate(args) -> int:
    ds = _load(args.input)
    curated, record = drop_annotations(ds, args.rate, args.seed)
    out = Path(args.out)
    record_path = Path(args.record) if args.record else out.with_name(out.stem + ".drops.json")
    write_manifest(
        manifest_path(out),
        "curate",
        {"rate": args.rate, "seed": args.seed, "out": str(out), "record": str(record_path)},
        [args.seed],
        [args.input],
    )
    write_atomic(out, dump_json(dataset_to_json(curated)))
    write_atomic(record_path, dump_json(record.to_json()))
    return EXIT_OK


# --------------------------------------------------------------------------
# weigh


def _read_scores(path, ds: Dataset):
    """Scores file: ``{"rois": {image_id: [[class_id, score], ...]},
    "thresholds": {class_id: T}}``; ``"gt_scores": {class_id: [...]}`` may
    stand in for ``thresholds``."""
    doc = _read_json(path)
    if not isinstance(doc, dict) or "rois" not in doc:
        raise DataError(f"{path}: expected an object with a 'rois' field")
    try:
        if "thresholds" in doc:
            thresholds = {int(k): float(v) for k, v in doc["thresholds"].items()}
        elif "gt_scores" in doc:
            thresholds = dict(
                per_class_thresholds({int(k): v for k, v in doc["gt_scores"].items()})
            )
        else:
            raise DataError(f"{path}: needs 'thresholds' or 'gt_scores'")
        rois = {
            str(k): [(int(c), float(s)) for c, s in v] for k, v in doc["rois"].items()
        }
    except (TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"{path}: {exc}")
    for im in ds.images:
        n = len(im.proposals or ())
        got = len(rois.get(im.image_id, []))
        if n and got != n:
            raise DataError(f"{path}: image {im.image_id!r} has {n} proposals but {got} RoI scores")
    return rois, thresholds


def weigh_rows(ds: Dataset, args, rois=None, thresholds=None) -> List[dict]:
    gparams = GompertzParams(args.a, args.b, args.c)
    cfg = AssignmentConfig(fg_threshold=args.fg_thresh, hard_negative_min_overlap=args.hn_min_overlap)
    rows = []
    for im in ds.images:
        if not im.proposals:
            continue
        boxes = [p.box for p in im.proposals]
        samples = assign_labels(boxes, [(a.box, a.class_id) for a in im.kept], cfg)
        included = [True] * len(samples)
        if args.strategy == "hard-negative":
            included = [s.is_positive or s.max_overlap >= cfg.hard_negative_min_overlap for s in samples]
        elif args.strategy == "oss":
            samples = overlap_soft_weights(samples, gparams)
        elif args.strategy == "score-ss":
            samples = score_soft_weights(samples, rois[im.image_id], thresholds, gparams, cfg)
        elif args.strategy == "upper-bound":
            mask = upper_bound_ignore_mask(boxes, [a.box for a in im.dropped], cfg.fg_threshold)
            included = [not m for m in mask]
        for i, (s, inc) in enumerate(zip(samples, included)):
            rows.append(
                {
                    "image_id": im.image_id,
                    "proposal": i,
                    "box": list(s.box),
                    "label": s.label,
                    "max_overlap": s.max_overlap,
                    "matched_gt": s.matched_gt,
                    "weight": s.weight if inc else 0.0,
                    "included": inc,
                }
            )
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["image_id", "proposal", "x_min", "y_min", "x_max", "y_max", "label", "max_overlap",
         "weight", "included"]
    )
    for r in rows:
        w.writerow(
            [r["image_id"], r["proposal"]]
            + [fmt(v) for v in r["box"]]
            + ["" if r["label"] is None else r["label"], fmt(r["max_overlap"]), fmt(r["weight"]),
               int(r["included"])]
        )
    return buf.getvalue()


def cmd_weigh(args) -> int:
    if args.strategy == "score-ss" and not args.scores:
        raise UsageError("--strategy score-ss requires --scores")
    ds = _load(args.input)
    if not ds.has_proposals:
        raise DataError(f"{args.input}: dataset has no proposals")
    rois = thresholds = None
    inputs = [args.input]
    if args.strategy == "score-ss":
        rois, thresholds = _read_scores(args.scores, ds)
        inputs.append(args.scores)
    try:
        rows = weigh_rows(ds, args, rois, thresholds)
    except MissingThresholdError as exc:
        raise DataError(str(exc.args[0]))
    out = Path(args.out)
    form = _output_format(out, args.format)
    config = {
        k: getattr(args, k)
        for k in ("strategy", "a", "b", "c", "fg_thresh", "hn_min_overlap")
    }
    config["format"] = form
    write_manifest(manifest_path(out), "weigh", config, [], inputs)
    write_atomic(out, rows_to_csv(rows) if form == "csv" else dump_json(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ds = _load(args.dataset)
    dets = detections_from_json(_read_json(args.detections))
    unknown = sorted({d.class_id for d in dets} - set(ds.class_names))
    if unknown:
        raise DataError(f"detections reference unknown class ids: {unknown}")
    known = {im.image_id for im in ds.images}
    strays = sorted({d.image_id for d in dets} - known)
    if strays:
        raise DataError(f"detections reference unknown image ids: {strays[:10]}")
    ious = sorted(args.iou or [0.5])
    reports = threshold_sweep(dets, ds, ious, args.ap_mode, args.include_dropped)
    out = Path(args.out)
    form = _output_format(out, args.format)
    config = {
        "iou": ious,
        "ap_mode": reports[0].ap_mode,
        "include_dropped": args.include_dropped,
        "format": form,
    }
    write_manifest(manifest_path(out), "eval", config, [], [args.dataset, args.detections])
    text = reports_to_csv(reports, ds.class_names) if form == "csv" else reports_to_json(reports)
    write_atomic(out, text)
    return EXIT_OK


# --------------------------------------------------------------------------
# hist


def cmd_hist(args) -> int:
    ds = _load(args.input)
    bins = overlap_risk_histogram(ds, args.bin_width, args.fg_thresh)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "probability", "count"])
    for b in bins:
        w.writerow([fmt(b.lo), fmt(b.hi), fmt(b.probability), b.count])
    out = Path(args.out)
    write_manifest(
        manifest_path(out), "hist", {"bin_width": args.bin_width, "fg_thresh": args.fg_thresh}, [],
        [args.input],
    )
    write_atomic(out, buf.getvalue())
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate

_SECTIONS = {
    "scene": SceneConfig,
    "train": TrainConfig,
    "gompertz": GompertzParams,
    "assignment": AssignmentConfig,
}
_TOP_LEVEL = {"drop_rates", "strategies", "n_seeds", "test_images", "eval_iou", *_SECTIONS}


class ConfigError(DataError):
    pass


def _check_value(where: str, value, hint):
    """Loose JSON type check against a dataclass field annotation."""
    origin = typing.get_origin(hint)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return
        return _check_value(where, value, args[0])
    elif origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        inner = typing.get_args(hint)
        if inner and inner[-1] is Ellipsis:
            for i, v in enumerate(value):
                _check_value(f"{where}[{i}]", v, inner[0])
        else:
            if len(value) != len(inner):
                raise ConfigError(f"{where}: expected {len(inner)} entries, got {len(value)}")
            for i, (v, h) in enumerate(zip(value, inner)):
                _check_value(f"{where}[{i}]", v, h)
        return
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {hint.__name__}, got {type(value).__name__}")


def _build_section(name: str, cls, doc) -> Any:
    where = f"config.{name}"
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        fields.discard("seed")  # seeds come from --seeds
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"{where}.{key}: unknown field (expected one of {sorted(fields)})")
        _check_value(f"{where}.{key}", value, hints[key])
    try:
        return cls(**doc)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}")


def build_specs(doc: dict, n_seeds: Optional[int] = None) -> List[ExperimentSpec]:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected an object")
    for key in doc:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"config.{key}: unknown field (expected one of {sorted(_TOP_LEVEL)})")
    rates = doc.get("drop_rates", list(DEFAULT_DROP_RATES))
    _check_value("config.drop_rates", rates, typing.Tuple[float, ...])
    strategies = doc.get("strategies", list(STRATEGIES))
    if not isinstance(strategies, list) or not all(s in STRATEGIES for s in strategies):
        raise ConfigError(f"config.strategies: expected a list drawn from {list(STRATEGIES)}")
    overrides: Dict[str, Any] = {}
    for key, hint in (("test_images", int), ("eval_iou", float)):
        if key in doc:
            _check_value(f"config.{key}", doc[key], hint)
            overrides[key] = doc[key]
    for name, cls in _SECTIONS.items():
        if name in doc:
            overrides[name] = _build_section(name, cls, doc[name])
    seeds = doc.get("n_seeds", 20)
    _check_value("config.n_seeds", seeds, int)
    if n_seeds is not None:
        seeds = n_seeds
    try:
        return default_grid(seeds, [float(r) for r in rates], strategies, **overrides)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}")


def cmd_simulate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    specs = build_specs(doc, args.seeds)
    out_dir = Path(args.out_dir)
    config = {
        "drop_rates": sorted({s.drop_rate for s in specs}),
        "strategies": [s for s in STRATEGIES if any(p.strategy == s for p in specs)],
        "experiment": dataclasses.asdict(dataclasses.replace(specs[0], strategy="baseline", drop_rate=0.0)),
    }
    for key in ("strategy", "drop_rate", "n_seeds"):
        config["experiment"].pop(key)
    seeds = list(range(specs[0].n_seeds))
    write_manifest(out_dir / "manifest.json", "simulate", config, seeds, [args.config] if args.config else [])

    def progress(spec, seed):
        if args.verbose:
            print(f"{spec.strategy} drop={spec.drop_rate} seed={seed}", file=sys.stderr)

    results = run_strategy_comparison(specs, progress)
    runs = [
        {"strategy": r.spec.strategy, "drop_rate": r.spec.drop_rate, **run.to_json()}
        for r in results
        for run in r.runs
    ]
    write_atomic(out_dir / "runs.json", dump_json(runs))
    write_atomic(out_dir / "table_sd.csv", results_sd_csv(results))
    write_atomic(out_dir / "table.csv", results_table_csv(results))
    return EXIT_OK


# --------------------------------------------------------------------------
# voc


def cmd_voc(args) -> int:
    names = None
    if args.classes:
        names = [n.strip() for n in args.classes.split(",") if n.strip()]
    try:
        ds = voc_to_dataset(args.xml, names, provenance=args.provenance)
    except OSError as exc:
        raise DataError(str(exc))
    out = Path(args.out)
    write_manifest(
        manifest_path(out), "voc", {"classes": names, "provenance": args.provenance}, [], args.xml
    )
    write_atomic(out, dump_json(dataset_to_json(ds)))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="softsample", description="Soft sampling toolkit for detection under missing labels.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("curate", help="drop a fraction of annotations per class")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--rate", type=float, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--record", help="DropRecord path (default: <out stem>.drops.json)")
    c.set_defaults(func=cmd_curate)

    w = sub.add_parser("weigh", help="per-proposal labels and loss weights")
    w.add_argument("--in", dest="input", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--strategy", choices=WEIGH_STRATEGIES, default="baseline")
    w.add_argument("--a", type=float, default=GompertzParams.a)
    w.add_argument("--b", type=float, default=GompertzParams.b)
    w.add_argument("--c", type=float, default=GompertzParams.c)
    w.add_argument("--fg-thresh", type=float, default=AssignmentConfig.fg_threshold)
    w.add_argument("--hn-min-overlap", type=float, default=AssignmentConfig.hard_negative_min_overlap)
    w.add_argument("--scores", help="prior detector scores (required for score-ss)")
    w.add_argument("--format", choices=("json", "csv"))
    w.set_defaults(func=cmd_weigh)

    e = sub.add_parser("eval", help="VOC-style AP of detections against a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--detections", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--iou", type=float, action="append", help="repeat for a sweep (default 0.5)")
    e.add_argument("--ap-mode", choices=AP_MODES)
    e.add_argument("--include-dropped", action="store_true")
    e.add_argument("--format", choices=("json", "csv"))
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("hist", help="missing-annotation risk by kept overlap")
    h.add_argument("--in", dest="input", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--bin-width", type=float, default=0.05)
    h.add_argument("--fg-thresh", type=float, default=0.5)
    h.set_defaults(func=cmd_hist)

    s = sub.add_parser("simulate", help="strategy comparison on synthetic scenes")
    s.add_argument("--config", help="JSON experiment config (default: built-in grid)")
    s.add_argument("--seeds", type=int, help="number of seeds (overrides config n_seeds)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("voc", help="convert VOC XML annotations to dataset JSON")
    v.add_argument("xml", nargs="+")
    v.add_argument("--out", required=True)
    v.add_argument("--classes", help="comma-separated class names, in id order")
    v.add_argument("--provenance", default="voc2007")
    v.set_defaults(func=cmd_voc)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetFormatError, CurationError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
