"""
Command-line entry point.

    stonefuse manifest --root DIR --out manifest.csv
    stonefuse augment  --manifest m.csv --filter split=train --seed 7 --out DIR
    stonefuse run      --manifest M --config C [--crops DIR] [--out results.jsonl]
    stonefuse bench    --manifest M --config C --reps N [--out bench.json]
    stonefuse score    --results results.jsonl --labels labels.csv --out report.json
                       [--reference reference.json --tol 0.03]

The grouped spellings ``dataprep manifest``, ``dataprep augment``,
``pipeline run``, ``pipeline bench`` and ``eval score`` are accepted too.

Exit status: 0 success, 1 when some images/files failed, 2 on usage or
configuration errors. Progress goes to stderr; artifacts go to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .dataprep import AugmentConfig, Manifest, ManifestError, augment, build_manifest
from .evaluation import MissingLabel, compare_to_reference, read_labels, read_reference, score
from .pipeline import ConfigError, Pipeline, PipelineConfig, read_results, write_results

log = logging.getLogger("stonefuse")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, type=Path, help="manifest CSV")
    p.add_argument("--config", type=Path, help="pipeline config file (INI key = value)")
    p.add_argument("--workers", type=int, help="worker threads (overrides config)")
    p.add_argument("--detector-model", type=Path, help="detector ONNX model")
    p.add_argument("--detector-replay", type=Path, help="detector replay fixture (JSON Lines)")
    p.add_argument("--classifier-model", type=Path, help="classifier ONNX model")
    p.add_argument("--classifier-replay", type=Path, help="classifier replay fixture (JSON Lines)")
    p.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE", help="manifest row filter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stonefuse", description="Kidney ROI detection and stone classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("manifest", help="scan an image directory into a manifest CSV")
    p.add_argument("--root", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--layout", default="split/label", help="directory levels above each image")
    p.add_argument("--subject-pattern", help="regex on the file stem; group 'subject' is the patient id")
    p.add_argument("--default-split", default="test")

    p = sub.add_parser("augment", help="offline flip/rotate augmentation of one class")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory for synthesized images")
    p.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotate-fraction", type=float, default=0.5)
    p.add_argument("--rotate-range", type=float, default=25.0, help="max |angle| in degrees")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--target-class", default="stone")
    p.add_argument("--manifest-out", type=Path, help="default: OUT/manifest.csv")

    p = sub.add_parser("run", help="run the pipeline over a manifest")
    _add_pipeline_flags(p)
    p.add_argument("--crops", type=Path, help="write ROI crops here")
    p.add_argument("--out", type=Path, default=Path("results.jsonl"))
    p.add_argument("--timings", action="store_true", help="include per-stage timings in results")

    p = sub.add_parser("bench", help="per-stage latency benchmark")
    _add_pipeline_flags(p)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--out", type=Path, default=Path("bench.json"))

    p = sub.add_parser("score", help="metrics from results and crop labels")
    p.add_argument("--results", required=True, type=Path)
    p.add_argument("--labels", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--reference", type=Path, help="JSON of metric -> target fraction")
    p.add_argument("--tol", type=float, default=0.03)
    return parser


def _parse_filters(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--filter expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_manifest(path: Path, filters: Sequence[str]) -> Manifest:
    try:
        manifest = Manifest.from_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read manifest: {exc}") from exc
    crit = _parse_filters(filters)
    return manifest.filter(**crit) if crit else manifest


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.detector_model is not None:
        cfg = replace(cfg, detector_model_path=args.detector_model, detector_replay_path=None)
    if args.detector_replay is not None:
        cfg = replace(cfg, detector_replay_path=args.detector_replay, detector_model_path=None)
    if args.classifier_model is not None:
        cfg = replace(cfg, classifier_model_path=args.classifier_model, classifier_replay_path=None)
    if args.classifier_replay is not None:
        cfg = replace(cfg, classifier_replay_path=args.classifier_replay, classifier_model_path=None)
    return cfg.merged(workers=args.workers, crop_output_dir=getattr(args, "crops", None))


def cmd_manifest(args: argparse.Namespace) -> int:
    m = build_manifest(args.root, args.layout, args.subject_pattern, args.default_split)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    m.to_csv(args.out)
    log.info("wrote %d rows to %s (split sizes %s)", len(m), args.out, m.split_sizes())
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest, args.filter)
    cfg = AugmentConfig(
        seed=args.seed,
        rotate_fraction=args.rotate_fraction,
        rotate_range_deg=args.rotate_range,
        flip=not args.no_flip,
        target_class=args.target_class,
    )
    res = augment(manifest, cfg, args.out)
    out = args.manifest_out or args.out / "manifest.csv"
    res.manifest.to_csv(out)
    log.info("%d inputs -> %d rows (%d new files); manifest %s", len(manifest), len(res.manifest), len(res.written), out)
    return EXIT_PARTIAL if res.errors else EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest, args.filter)
    pipe = Pipeline(_pipeline_config(args))
    results = pipe.run(manifest)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_results(results, args.out, include_timings=args.timings)
    n_err = sum(r.error is not None for r in results)
    n_excl = sum(r.excluded for r in results)
    n_rois = sum(len(r.roi_verdicts) for r in results)
    log.info("%d images, %d excluded, %d ROI verdicts, %d errors -> %s", len(results), n_excl, n_rois, n_err, args.out)
    return EXIT_PARTIAL if n_err else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    manifest = _load_manifest(args.manifest, args.filter)
    cfg = _pipeline_config(args)
    report = Pipeline(replace(cfg, crop_output_dir=None)).bench(manifest, args.reps)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for line in report.summary().splitlines():
        log.info(line)
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    if args.tol < 0:
        raise UsageError("--tol must be >= 0")
    try:
        results = read_results(args.results)
        labels = read_labels(args.labels)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read inputs: {exc}") from exc
    report = score(results, labels)
    out = report.to_dict()
    status = EXIT_OK
    if args.reference is not None:
        checks = compare_to_reference(report, read_reference(args.reference), args.tol)
        out["reference"] = [
            {"metric": c.metric, "observed": c.observed, "reference": c.reference, "tolerance": c.tolerance, "passed": c.passed}
            for c in checks
        ]
        for c in checks:
            log.info(c.line())
        if not all(c.passed for c in checks):
            status = EXIT_PARTIAL
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    m = report.metrics
    log.info(
        "%d crops: F1 %s  P %s  R %s  FN rate %s",
        report.crops.total,
        *(("n/a" if m[k] is None else f"{m[k]:.4f}") for k in ("f1", "precision", "recall", "fn_rate")),
    )
    if report.failed:
        status = EXIT_PARTIAL
    return status


# group word -> subcommands it may prefix
GROUPS = {"dataprep": ("manifest", "augment"), "pipeline": ("run", "bench"), "eval": ("score",)}

COMMANDS = {
    "manifest": cmd_manifest,
    "augment": cmd_augment,
    "run": cmd_run,
    "bench": cmd_bench,
    "score": cmd_score,
}


def _drop_group_word(argv: list[str]) -> list[str]:
    for i, tok in enumerate(argv):
        if not tok.startswith("-"):
            if tok in GROUPS and i + 1 < len(argv) and argv[i + 1] in GROUPS[tok]:
                return argv[:i] + argv[i + 1 :]
            break
    return argv


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = _drop_group_word(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ManifestError, MissingLabel, ValueError) as exc:
        print(f"stonefuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
