"""
Per-crop and per-image scoring of pipeline results.

Stone-positive is the positive class. Ratios whose denominator is zero are
reported as ``None`` rather than 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .corrector import DetectionHistogram, count_histogram
from .dataprep import canonical_label
from .pipeline import ImageResult

POSITIVE = "stone"

# Per-crop test metrics reported for the four classifier variants
# (fine-tuned head only / whole network, with / without augmentation).
REFERENCE_METRICS: dict[str, dict[str, float]] = {
    "fc": {"f1": 0.904, "precision": 0.904, "recall": 0.904, "fp_rate": 0.096, "fn_rate": 0.096},
    "fc+da": {"f1": 0.791, "precision": 0.791, "recall": 0.791, "fp_rate": 0.209, "fn_rate": 0.209},
    "mobilenet": {"f1": 0.9594, "precision": 0.9594, "recall": 0.9594, "fp_rate": 0.0406, "fn_rate": 0.0406},
    "mobilenet+da": {"f1": 0.9505, "precision": 0.9505, "recall": 0.9505, "fp_rate": 0.0495, "fn_rate": 0.0495},
}


class MissingLabel(KeyError):
    def __init__(self, crop_id: str):
        self.crop_id = crop_id
        super().__init__(f"no ground-truth label for crop {crop_id!r}")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, predicted: bool, actual: bool) -> None:
        if predicted and actual:
            self.tp += 1
        elif predicted:
            self.fp += 1
        elif actual:
            self.fn += 1
        else:
            self.tn += 1

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    @property
    def fp_rate(self) -> float | None:
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def fn_rate(self) -> float | None:
        return _ratio(self.fn, self.fn + self.tp)

    @property
    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    def metrics(self) -> dict[str, float | None]:
        """Binary metrics for the stone class plus micro-averaged variants.

        Micro-averaging over both classes makes precision, recall and F1 all
        equal to accuracy, and the FP and FN rates both equal to the error
        rate. ``fp_share``/``fn_share`` split the errors themselves.
        """
        errors = self.fp + self.fn
        acc = self.accuracy
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fp_rate": self.fp_rate,
            "fn_rate": self.fn_rate,
            "specificity": self.specificity,
            "accuracy": acc,
            "micro_precision": acc,
            "micro_recall": acc,
            "micro_f1": acc,
            "micro_fp_rate": None if acc is None else 1.0 - acc,
            "micro_fn_rate": None if acc is None else 1.0 - acc,
            "fp_share": _ratio(self.fp, errors),
            "fn_share": _ratio(self.fn, errors),
        }

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class EvalReport:
    crops: ConfusionMatrix
    histogram: DetectionHistogram
    n_images: int
    excluded: int
    failed: int
    images: ConfusionMatrix | None = None
    metrics: dict[str, float | None] = field(init=False)

    def __post_init__(self) -> None:
        self.metrics = self.crops.metrics()

    def __getattr__(self, name: str) -> Any:
        metrics = self.__dict__.get("metrics")
        if metrics is not None and name in metrics:
            return metrics[name]
        raise AttributeError(name)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "n_images": self.n_images,
            "excluded_images": self.excluded,
            "failed_images": self.failed,
            "per_crop": {"confusion": self.crops.to_dict(), "n": self.crops.total, "metrics": self.metrics},
            "detection_histogram": self.histogram.to_dict(),
        }
        if self.images is not None:
            out["per_image"] = {
                "confusion": self.images.to_dict(),
                "n": self.images.total,
                "metrics": self.images.metrics(),
            }
        return out


def score(results: Sequence[ImageResult], labels: Mapping[str, str]) -> EvalReport:
    """Score classified crops against ``labels`` (crop id -> ``stone``/``normal``).

    Excluded images and images whose processing failed are counted separately
    and contribute no crops. The image-level table uses each result's own
    label and is omitted when no classified image carries one.
    """
    crops = ConfusionMatrix()
    images = ConfusionMatrix()
    n_labeled_images = 0
    excluded = failed = 0
    hist_rows = []
    for r in results:
        if r.error is not None and r.error.stage in ("decode", "detect"):
            failed += 1
            continue
        hist_rows.append((r.detection_count, r.label or "unknown"))
        if r.excluded:
            excluded += 1
            continue
        if r.error is not None:
            failed += 1
            continue
        for v in r.roi_verdicts:
            if v.roi_id not in labels:
                raise MissingLabel(v.roi_id)
            crops.add(v.positive, canonical_label(labels[v.roi_id]) == POSITIVE)
        if r.image_verdict is not None and r.label is not None:
            images.add(r.image_verdict.positive, canonical_label(r.label) == POSITIVE)
            n_labeled_images += 1
    return EvalReport(
        crops=crops,
        histogram=count_histogram(hist_rows),
        n_images=len(results),
        excluded=excluded,
        failed=failed,
        images=images if n_labeled_images else None,
    )


@dataclass(frozen=True)
class ReferenceCheck:
    metric: str
    observed: float | None
    reference: float
    tolerance: float

    @property
    def diff(self) -> float | None:
        return None if self.observed is None else abs(self.observed - self.reference)

    @property
    def passed(self) -> bool:
        # The 1e-12 slack absorbs float noise from values such as 0.9594 - 0.03.
        return self.diff is not None and self.diff <= self.tolerance + 1e-12

    def line(self) -> str:
        obs = "n/a" if self.observed is None else f"{self.observed:.4f}"
        return (
            f"{'PASS' if self.passed else 'FAIL'} {self.metric}: observed {obs} "
            f"reference {self.reference:.4f} tol {self.tolerance:g}"
        )


def compare_to_reference(
    report: EvalReport | Mapping[str, float | None], reference: Mapping[str, float], tolerance: float
) -> list[ReferenceCheck]:
    """Check ``|observed - reference| <= tolerance`` for every reference metric.

    Values are fractions (0.9594, not 95.94). A metric the report cannot
    compute counts as a failure.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    observed = report.metrics if isinstance(report, EvalReport) else report
    return [
        ReferenceCheck(name, observed.get(name), float(ref), tolerance) for name, ref in reference.items()
    ]


def read_labels(path: str | Path) -> dict[str, str]:
    """Labels CSV with header ``crop_id,label``."""
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"crop_id", "label"} <= set(reader.fieldnames or ()):
            raise ValueError(f"{path}: expected columns crop_id,label")
        for rec in reader:
            out[rec["crop_id"]] = canonical_label(rec["label"])
    return out


def write_labels(labels: Mapping[str, str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["crop_id", "label"])
        for k in sorted(labels):
            w.writerow([k, labels[k]])


def read_reference(path: str | Path) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return {str(k): float(v) for k, v in data.items()}


def crop_labels_from_images(results: Iterable[ImageResult]) -> dict[str, str]:
    """Give every crop its image's label.

    Only a proxy: a stone-positive image usually has one clean kidney, so this
    overcounts positive crops. Use annotated per-crop labels when available.
    """
    return {rid: r.label for r in results if r.label for rid, _ in r.rois}
