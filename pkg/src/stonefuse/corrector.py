"""
Detection-set correction into exactly two kidney ROIs.

Rules, applied to detections already ranked by confidence:

* no detection      -> the image is excluded from classification
* one detection     -> the missing kidney is synthesized by mirroring the box
                       across the vertical centerline of the image
* two detections    -> used as they are
* three or more     -> only the two highest-ranked boxes are kept

The resulting pair is always ordered left to right.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from .detector import iou
from .imaging import BoxXYXY, mirror_box

log = logging.getLogger(__name__)

MIRROR_COLLISION_IOU = 0.9


class Provenance(str, enum.Enum):
    BOTH_DETECTED = "both_detected"
    MIRROR_SYNTHESIZED = "mirror_synthesized"
    TRUNCATED_FROM_THREE = "truncated_from_three"


class Excluded:
    """Outcome for images with no detected kidney."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EXCLUDED"

    def __reduce__(self):
        return (Excluded, ())


EXCLUDED = Excluded()


@dataclass(frozen=True)
class RoiPair:
    left: BoxXYXY
    right: BoxXYXY
    provenance: Provenance
    # "left"/"right" when the corresponding box was synthesized by mirroring.
    synthetic_side: str | None = None
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.left.x1 > self.right.x1:
            raise ValueError("RoiPair boxes must be ordered left to right")

    @property
    def boxes(self) -> tuple[BoxXYXY, BoxXYXY]:
        return (self.left, self.right)


CorrectionOutcome = Union[RoiPair, Excluded]


def _left_to_right(a: BoxXYXY, b: BoxXYXY) -> tuple[BoxXYXY, BoxXYXY, bool]:
    """Order two boxes by x1 (then y1); the flag says whether they were swapped."""
    if (b.x1, b.y1) < (a.x1, a.y1):
        return b, a, True
    return a, b, False


def correct(detections: Sequence[BoxXYXY], image_width: int) -> CorrectionOutcome:
    """Reduce ranked detections to a left/right :class:`RoiPair` or ``EXCLUDED``.

    ``detections`` must be sorted by descending confidence, as returned by the
    detector. A single box straddling the midline mirrors onto itself; that
    case is flagged with a ``mirror_collision`` warning but the pair is still
    returned.
    """
    n = len(detections)
    if n == 0:
        return EXCLUDED
    if n == 1:
        src = detections[0]
        synth = mirror_box(src, image_width)
        warnings: tuple[str, ...] = ()
        overlap = iou(src, synth)
        if overlap > MIRROR_COLLISION_IOU:
            warnings = (f"mirror_collision: mirrored box overlaps source with IoU {overlap:.3f}",)
            log.warning("single detection straddles the midline (IoU %.3f with its mirror)", overlap)
        left, right, swapped = _left_to_right(src, synth)
        return RoiPair(
            left,
            right,
            Provenance.MIRROR_SYNTHESIZED,
            synthetic_side="left" if swapped else "right",
            warnings=warnings,
        )
    provenance = Provenance.BOTH_DETECTED if n == 2 else Provenance.TRUNCATED_FROM_THREE
    left, right, _ = _left_to_right(detections[0], detections[1])
    return RoiPair(left, right, provenance)


def correction_log_line(stem: str, n_detected: int, outcome: CorrectionOutcome) -> str:
    """``<stem>, n_detected, outcome, provenance``"""
    if isinstance(outcome, Excluded):
        return f"{stem}, {n_detected}, excluded, -"
    return f"{stem}, {n_detected}, pair, {outcome.provenance.value}"


@dataclass
class DetectionHistogram:
    """Images per detected-kidney count (0, 1, 2, 3+) split by label."""

    counts: dict[str, Counter] = field(default_factory=dict)
    # Images with four or more detections, which are also counted under 3.
    folded: int = 0

    BUCKETS = (0, 1, 2, 3)

    def totals(self) -> dict[int, int]:
        out = {k: 0 for k in self.BUCKETS}
        for c in self.counts.values():
            for k in self.BUCKETS:
                out[k] += c[k]
        return out

    def by_label(self, label: str) -> dict[int, int]:
        c = self.counts.get(label, Counter())
        return {k: c[k] for k in self.BUCKETS}

    @property
    def n_images(self) -> int:
        return sum(self.totals().values())

    def to_dict(self) -> dict:
        return {
            "buckets": list(self.BUCKETS),
            "by_label": {lab: self.by_label(lab) for lab in sorted(self.counts)},
            "total": self.totals(),
            "folded_over_3": self.folded,
        }


def count_histogram(outcomes: Iterable[tuple[int, str]]) -> DetectionHistogram:
    """Tabulate ``(detection_count, label)`` pairs; counts above 3 fold into 3."""
    hist = DetectionHistogram()
    for n, label in outcomes:
        if n < 0:
            raise ValueError(f"negative detection count {n}")
        if n > 3:
            hist.folded += 1
            n = 3
        hist.counts.setdefault(label, Counter())[n] += 1
    return hist
