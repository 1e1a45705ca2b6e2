"""
Batch orchestration: decode -> detect -> correct -> crop -> classify -> aggregate.

Every manifest row yields exactly one :class:`ImageResult`, in manifest order,
whatever the worker count. Failures are recorded on the result of the image
that caused them and never abort the batch.
"""

from __future__ import annotations

import configparser
import json
import logging
import queue
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import imaging
from .classifier import (
    ClassifierConfig,
    ClassifierReplay,
    ImageVerdict,
    Verdict,
    aggregate,
    classify,
)
from .corrector import EXCLUDED, CorrectionOutcome, Excluded, Provenance, RoiPair, correct, correction_log_line
from .dataprep import ManifestRow
from .detector import DetectorConfig, InferenceBackend, OnnxBackend, ReplayFixture, detect
from .imaging import BoxXYXY

log = logging.getLogger(__name__)

STAGES = ("decode", "detect", "correct", "crop", "classify")
BackendFactory = Callable[[], InferenceBackend]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Per stage, set exactly one of a model path or a replay fixture path."""

    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    detector_model_path: Path | None = None
    detector_replay_path: Path | None = None
    classifier_model_path: Path | None = None
    classifier_replay_path: Path | None = None
    workers: int = 1
    crop_output_dir: Path | None = None

    def check(self, detector_factory: bool = False, classifier_factory: bool = False) -> None:
        """Raise :class:`ConfigError` unless each stage has exactly one source."""
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for stage, model, replay, factory in (
            ("detector", self.detector_model_path, self.detector_replay_path, detector_factory),
            ("classifier", self.classifier_model_path, self.classifier_replay_path, classifier_factory),
        ):
            n = (model is not None) + (replay is not None) + bool(factory)
            if n != 1:
                raise ConfigError(f"{stage}: set exactly one of a model path or a replay fixture (got {n})")
            for p in (model, replay):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"{stage}: file not found: {p}")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        """Load an INI-style key/value file.

        Sections ``[pipeline]``, ``[detector]`` and ``[classifier]`` mirror the
        dataclass fields; relative paths resolve against the file's directory::

            [pipeline]
            detector_replay_path = fixtures/detections.jsonl
            classifier_model_path = models/classifier.onnx
            workers = 4

            [detector]
            conf_threshold = 0.25
        """
        path = Path(path)
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(parser.sections()) - {"pipeline", "detector", "classifier"}
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        base = path.parent
        top = dict(parser["pipeline"]) if parser.has_section("pipeline") else {}
        det = dict(parser["detector"]) if parser.has_section("detector") else {}
        cls_ = dict(parser["classifier"]) if parser.has_section("classifier") else {}
        try:
            kwargs: dict[str, Any] = {
                "detector": _build(DetectorConfig, det),
                "classifier": _build(ClassifierConfig, cls_),
            }
            kwargs.update(_coerce_top(top, base))
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def merged(self, **overrides: Any) -> "PipelineConfig":
        """Copy with non-None overrides applied (command-line flags win)."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_PATH_KEYS = {
    "detector_model_path",
    "detector_replay_path",
    "classifier_model_path",
    "classifier_replay_path",
    "crop_output_dir",
}


def _coerce_top(values: dict[str, str], base: Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, raw in values.items():
        if key in _PATH_KEYS:
            p = Path(raw).expanduser()
            out[key] = p if p.is_absolute() else base / p
        elif key == "workers":
            out[key] = int(raw)
        else:
            raise ValueError(f"unknown pipeline key {key!r}")
    return out


def _build(kind: type, values: dict[str, str]) -> Any:
    types = {f.name: f.type for f in fields(kind)}
    kwargs: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown {kind.__name__} key {key!r}")
        t = str(types[key])
        if "bool" in t:
            kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif "tuple" in t:
            kwargs[key] = tuple(float(v) for v in raw.replace(",", " ").split())
        elif "int" in t:
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return kind(**kwargs)


@dataclass(frozen=True)
class StageError:
    stage: str
    message: str


@dataclass
class ImageResult:
    stem: str
    label: str | None = None
    detection_count: int = 0
    detections: list[BoxXYXY] = field(default_factory=list)
    outcome: CorrectionOutcome | None = None
    roi_verdicts: list[Verdict] = field(default_factory=list)
    image_verdict: ImageVerdict | None = None
    timings: dict[str, float] = field(default_factory=dict)
    error: StageError | None = None

    @property
    def excluded(self) -> bool:
        return isinstance(self.outcome, Excluded)

    @property
    def rois(self) -> list[tuple[str, BoxXYXY]]:
        if not isinstance(self.outcome, RoiPair):
            return []
        return [(roi_id(self.stem, i), b) for i, b in enumerate(self.outcome.boxes)]

    def to_record(self, include_timings: bool = False) -> dict[str, Any]:
        pair = self.outcome if isinstance(self.outcome, RoiPair) else None
        verdicts = {v.roi_id: v for v in self.roi_verdicts}
        rec: dict[str, Any] = {
            "stem": self.stem,
            "label": self.label,
            "detection_count": self.detection_count,
            "detections": [b.as_list() for b in self.detections],
            "outcome": None if self.outcome is None else ("excluded" if self.excluded else "pair"),
            "provenance": pair.provenance.value if pair else None,
            "synthetic_side": pair.synthetic_side if pair else None,
            "warnings": list(pair.warnings) if pair else [],
            "rois": [
                {
                    "roi_id": rid,
                    "box": box.as_list(),
                    "score": verdicts[rid].score if rid in verdicts else None,
                    "positive": verdicts[rid].positive if rid in verdicts else None,
                }
                for rid, box in self.rois
            ],
            "image_verdict": (
                None
                if self.image_verdict is None
                else {"score": self.image_verdict.score, "positive": self.image_verdict.positive}
            ),
            "error": None if self.error is None else {"stage": self.error.stage, "message": self.error.message},
        }
        if include_timings:
            rec["timings_ms"] = dict(self.timings)
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ImageResult":
        outcome: CorrectionOutcome | None = None
        verdicts = []
        if rec.get("outcome") == "excluded":
            outcome = EXCLUDED
        elif rec.get("outcome") == "pair":
            left, right = (BoxXYXY.from_seq(r["box"]) for r in rec["rois"])
            outcome = RoiPair(
                left,
                right,
                Provenance(rec["provenance"]),
                synthetic_side=rec.get("synthetic_side"),
                warnings=tuple(rec.get("warnings", ())),
            )
            verdicts = [
                Verdict(r["roi_id"], float(r["score"]), bool(r["positive"]))
                for r in rec["rois"]
                if r.get("score") is not None
            ]
        iv = rec.get("image_verdict")
        err = rec.get("error")
        return cls(
            stem=rec["stem"],
            label=rec.get("label"),
            detection_count=int(rec.get("detection_count", 0)),
            detections=[BoxXYXY.from_seq(b) for b in rec.get("detections", [])],
            outcome=outcome,
            roi_verdicts=verdicts,
            image_verdict=None if iv is None else ImageVerdict(float(iv["score"]), bool(iv["positive"])),
            timings=dict(rec.get("timings_ms", {})),
            error=None if err is None else StageError(err["stage"], err["message"]),
        )


def roi_id(stem: str, index: int) -> str:
    return f"{stem}_kidney{index}"


def write_results(results: Iterable[ImageResult], path: str | Path, include_timings: bool = False) -> None:
    """JSON Lines, one record per image. Timings are off by default so that
    reruns over the same inputs produce byte-identical files."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record(include_timings), sort_keys=True) + "\n")


def read_results(path: str | Path) -> list[ImageResult]:
    with open(path, encoding="utf-8") as fh:
        return [ImageResult.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class _Workerset:
    detector: InferenceBackend | None
    classifier: InferenceBackend | None


class Pipeline:
    """Holds loaded backends/fixtures; reusable across runs and benchmarks.

    ``detector_factory`` / ``classifier_factory`` build a fresh backend per
    worker and replace the corresponding model/replay setting of ``cfg``.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        detector_factory: BackendFactory | None = None,
        classifier_factory: BackendFactory | None = None,
    ):
        cfg.check(detector_factory is not None, classifier_factory is not None)
        self.cfg = cfg
        try:
            self.replay = ReplayFixture.load(cfg.detector_replay_path) if cfg.detector_replay_path else None
            self.cls_replay = (
                ClassifierReplay.load(cfg.classifier_replay_path) if cfg.classifier_replay_path else None
            )
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

        if detector_factory is None and cfg.detector_model_path is not None:
            detector_factory = lambda: OnnxBackend(cfg.detector_model_path)  # noqa: E731
        if classifier_factory is None and cfg.classifier_model_path is not None:
            classifier_factory = lambda: OnnxBackend(cfg.classifier_model_path)  # noqa: E731

        self._pool: queue.Queue[_Workerset] = queue.Queue()
        try:
            for _ in range(cfg.workers):
                self._pool.put(
                    _Workerset(
                        detector_factory() if detector_factory else None,
                        classifier_factory() if classifier_factory else None,
                    )
                )
        except Exception as exc:
            raise ConfigError(f"cannot create backends: {exc}") from exc

    def process(self, row: ManifestRow, write_crops: bool = True) -> ImageResult:
        ws = self._pool.get()
        try:
            return self._process(row, ws, write_crops)
        finally:
            self._pool.put(ws)

    def _process(self, row: ManifestRow, ws: _Workerset, write_crops: bool) -> ImageResult:
        res = ImageResult(stem=row.stem, label=row.label)
        stage = "decode"
        t_start = time.perf_counter()
        t = t_start

        def lap(name: str) -> None:
            nonlocal t
            now = time.perf_counter()
            res.timings[name] = (now - t) * 1000.0
            t = now

        try:
            img = imaging.decode_image(Path(row.path).read_bytes())
            lap("decode")

            stage = "detect"
            h, w = img.shape[:2]
            if self.replay is not None:
                boxes = self.replay.detect(row.stem, w, h, self.cfg.detector)
            else:
                boxes = detect(img, ws.detector, self.cfg.detector)
            res.detection_count = len(boxes)
            res.detections = boxes
            lap("detect")

            stage = "correct"
            res.outcome = correct(boxes, w)
            lap("correct")
            log.debug(correction_log_line(row.stem, len(boxes), res.outcome))

            if isinstance(res.outcome, Excluded):
                res.timings["total"] = (time.perf_counter() - t_start) * 1000.0
                return res

            stage = "crop"
            crops = [(rid, imaging.crop(img, box)) for rid, box in res.rois]
            if write_crops and self.cfg.crop_output_dir is not None:
                out_dir = Path(self.cfg.crop_output_dir)
                out_dir.mkdir(parents=True, exist_ok=True)
                for rid, c in crops:
                    (out_dir / f"{rid}.png").write_bytes(imaging.encode_png(c))
            lap("crop")

            stage = "classify"
            verdicts = []
            per_roi = []
            for rid, c in crops:
                t0 = time.perf_counter()
                if self.cls_replay is not None:
                    verdicts.append(self.cls_replay.classify(rid, self.cfg.classifier))
                else:
                    verdicts.append(classify(c, ws.classifier, self.cfg.classifier, roi_id=rid))
                per_roi.append((time.perf_counter() - t0) * 1000.0)
            res.roi_verdicts = verdicts
            res.image_verdict = aggregate(verdicts)
            lap("classify")
            for i, ms in enumerate(per_roi):
                res.timings[f"classify_roi{i}"] = ms
        except Exception as exc:
            res.error = StageError(stage, f"{type(exc).__name__}: {exc}")
            log.error("%s: %s stage failed: %s", row.stem, stage, exc)
        res.timings["total"] = (time.perf_counter() - t_start) * 1000.0
        return res

    def run(self, manifest: Iterable[ManifestRow], write_crops: bool = True) -> list[ImageResult]:
        rows = list(manifest)
        if self.cfg.workers == 1 or len(rows) <= 1:
            return [self.process(r, write_crops) for r in rows]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(lambda r: self.process(r, write_crops), rows))

    def bench(self, manifest: Iterable[ManifestRow], repetitions: int) -> "LatencyReport":
        """Time the whole manifest ``repetitions`` times (crops are not written).

        With three or more repetitions the first pass is a warm-up and is left
        out of the statistics.
        """
        if repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        rows = list(manifest)
        runs = [self.run(rows, write_crops=False) for _ in range(repetitions)]
        skip = 1 if repetitions >= 3 else 0
        return LatencyReport.from_runs(runs[skip:], repetitions=repetitions, warmup_excluded=bool(skip))


def run_pipeline(
    manifest: Iterable[ManifestRow],
    cfg: PipelineConfig,
    detector_factory: BackendFactory | None = None,
    classifier_factory: BackendFactory | None = None,
) -> list[ImageResult]:
    return Pipeline(cfg, detector_factory, classifier_factory).run(manifest)


def bench(
    manifest: Iterable[ManifestRow],
    cfg: PipelineConfig,
    repetitions: int,
    detector_factory: BackendFactory | None = None,
    classifier_factory: BackendFactory | None = None,
) -> "LatencyReport":
    return Pipeline(cfg, detector_factory, classifier_factory).bench(manifest, repetitions)


@dataclass(frozen=True)
class StageStats:
    n: int
    mean: float
    median: float
    p95: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> "StageStats | None":
        if not samples:
            return None
        a = np.asarray(samples, dtype=np.float64)
        return cls(len(a), float(a.mean()), float(np.median(a)), float(np.percentile(a, 95)))


@dataclass
class LatencyReport:
    """Wall-clock milliseconds per stage, per ROI classification and end to end."""

    repetitions: int
    warmup_excluded: bool
    n_images: int
    stages: dict[str, StageStats]
    failures: int = 0

    @classmethod
    def from_runs(
        cls, runs: Sequence[Sequence[ImageResult]], repetitions: int, warmup_excluded: bool
    ) -> "LatencyReport":
        samples: dict[str, list[float]] = {s: [] for s in (*STAGES, "classify_per_roi", "total")}
        failures = 0
        for results in runs:
            for r in results:
                if r.error is not None:
                    failures += 1
                    continue
                for key, ms in r.timings.items():
                    if key.startswith("classify_roi"):
                        samples["classify_per_roi"].append(ms)
                    else:
                        samples[key].append(ms)
        stages = {k: st for k, v in samples.items() if (st := StageStats.of(v)) is not None}
        n_images = len(runs[0]) if runs else 0
        return cls(repetitions, warmup_excluded, n_images, stages, failures)

    def to_dict(self) -> dict[str, Any]:
        return {
            "repetitions": self.repetitions,
            "warmup_excluded": self.warmup_excluded,
            "n_images": self.n_images,
            "failures": self.failures,
            "stages_ms": {
                k: {"n": s.n, "mean": s.mean, "median": s.median, "p95": s.p95} for k, s in self.stages.items()
            },
        }

    def summary(self) -> str:
        lines = [f"{'stage':<18}{'n':>6}{'mean':>10}{'median':>10}{'p95':>10}  (ms)"]
        for k, s in self.stages.items():
            lines.append(f"{k:<18}{s.n:>6}{s.mean:>10.2f}{s.median:>10.2f}{s.p95:>10.2f}")
        return "\n".join(lines)
