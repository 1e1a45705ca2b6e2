"""
Binary stone/normal classification of kidney ROIs with a single-logit head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import BackendError, InferenceBackend, ShapeMismatch
from .imaging import IMAGENET_MEAN, IMAGENET_STD, normalize


@dataclass(frozen=True)
class ClassifierConfig:
    input_side: int = 224
    threshold: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    # Set when the exported model already ends in a sigmoid.
    output_is_probability: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.input_side < 1:
            raise ValueError("input_side must be >= 1")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std must be three values with positive std")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))


@dataclass(frozen=True)
class Verdict:
    roi_id: str
    score: float
    positive: bool


@dataclass(frozen=True)
class ImageVerdict:
    score: float
    positive: bool


def sigmoid(x: float) -> float:
    """Logistic function, evaluated without overflow for large ``|x|``."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def verdict_from_output(value: float, roi_id: str, cfg: ClassifierConfig) -> Verdict:
    """Map a raw head output to a thresholded verdict (score == threshold is positive)."""
    value = float(value)
    if not math.isfinite(value):
        raise BackendError(f"non-finite classifier output {value} for {roi_id}")
    if cfg.output_is_probability:
        if not 0.0 <= value <= 1.0:
            raise BackendError(f"probability output {value} outside [0, 1] for {roi_id}")
        score = value
    else:
        score = sigmoid(value)
    return Verdict(roi_id=roi_id, score=score, positive=score >= cfg.threshold)


def classify(
    roi: np.ndarray,
    backend: InferenceBackend,
    cfg: ClassifierConfig = ClassifierConfig(),
    roi_id: str = "",
) -> Verdict:
    """Normalize ``roi``, run the backend and threshold the sigmoid score.

    Raises:
        ShapeMismatch: if the output is not a single value once batch dims
            are squeezed.
    """
    x = normalize(roi, cfg.input_side, cfg.mean, cfg.std)[None]
    out = backend.checked_run(x)
    if out.size != 1:
        raise ShapeMismatch(f"classifier output must be a single value, got shape {out.shape}")
    return verdict_from_output(out.reshape(()).item(), roi_id, cfg)


def aggregate(verdicts: Sequence[Verdict]) -> ImageVerdict:
    """Image is positive if either kidney is; its score is the larger ROI score."""
    if len(verdicts) != 2:
        raise ValueError(f"expected two ROI verdicts, got {len(verdicts)}")
    return ImageVerdict(
        score=max(v.score for v in verdicts),
        positive=any(v.positive for v in verdicts),
    )


class ClassifierReplay:
    """Recorded classifier outputs keyed by ROI id.

    JSON Lines, one record per ROI: ``{"roi": "<stem>_kidney0", "logit": x}``
    or ``{"roi": ..., "score": p}`` for probabilities.
    """

    def __init__(self, records: Mapping[str, tuple[str, float]]):
        self._records = dict(records)

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierReplay":
        records: dict[str, tuple[str, float]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    roi = str(rec["roi"])
                    if "logit" in rec:
                        records[roi] = ("logit", float(rec["logit"]))
                    else:
                        records[roi] = ("score", float(rec["score"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad classifier record: {exc}") from exc
        return cls(records)

    def classify(self, roi_id: str, cfg: ClassifierConfig = ClassifierConfig()) -> Verdict:
        if roi_id not in self._records:
            raise BackendError(f"no classifier record for ROI {roi_id!r}")
        kind, value = self._records[roi_id]
        return verdict_from_output(value, roi_id, replace(cfg, output_is_probability=kind == "score"))
