"""
Kidney detector: backends, raw-output decoding, NMS and coordinate unmapping.

A backend is anything with a declared ``output_shape`` and a ``run`` method
taking the ``(1, 3, S, S)`` float32 input tensor. :class:`OnnxBackend` wraps an
exported model file; :class:`StubBackend` is a deterministic test double.
Recorded detections can bypass the network entirely through
:class:`ReplayFixture`.
"""

from __future__ import annotations

import json
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .imaging import BoxXYXY, DegenerateBox, LetterboxMap, letterbox, unmap_box


class BackendError(RuntimeError):
    pass


class ShapeMismatch(BackendError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    conf_threshold: float = 0.25
    iou_threshold: float = 0.45
    input_side: int = 640
    max_detections: int = 8

    def __post_init__(self) -> None:
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError(f"conf_threshold must be in (0, 1), got {self.conf_threshold}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")
        if self.input_side < 1:
            raise ValueError("input_side must be >= 1")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


Shape = tuple  # dims are int or None (dynamic)


class InferenceBackend(ABC):
    """One model instance. Not shared between workers."""

    @property
    @abstractmethod
    def output_shape(self) -> Shape:
        """Declared output shape; ``None`` marks a dynamic dimension."""

    @abstractmethod
    def run(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a float32 NCHW tensor."""

    def checked_run(self, x: np.ndarray) -> np.ndarray:
        try:
            out = np.asarray(self.run(x))
        except BackendError:
            raise
        except Exception as exc:
            raise BackendError(f"{type(self).__name__} failed: {exc}") from exc
        declared = self.output_shape
        if len(declared) != out.ndim or any(
            d is not None and d != n for d, n in zip(declared, out.shape)
        ):
            raise ShapeMismatch(f"output shape {out.shape} does not match declared {declared}")
        return out


class OnnxBackend(InferenceBackend):
    """CPU onnxruntime session over an exported model file."""

    def __init__(self, path: str | Path, intra_op_threads: int | None = None):
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - depends on install extras
            raise BackendError("onnxruntime is not installed (pip install stonefuse[onnx])") from exc
        opts = ort.SessionOptions()
        if intra_op_threads is not None:
            opts.intra_op_num_threads = intra_op_threads
        try:
            self.session = ort.InferenceSession(
                str(path), sess_options=opts, providers=["CPUExecutionProvider"]
            )
        except Exception as exc:
            raise BackendError(f"cannot load model {path}: {exc}") from exc
        self.path = Path(path)
        self.input_name = self.session.get_inputs()[0].name
        self._output_shape = tuple(
            d if isinstance(d, int) else None for d in self.session.get_outputs()[0].shape
        )

    @property
    def output_shape(self) -> Shape:
        return self._output_shape

    def run(self, x: np.ndarray) -> np.ndarray:
        return self.session.run(None, {self.input_name: np.ascontiguousarray(x, np.float32)})[0]


class StubBackend(InferenceBackend):
    """Backend returning a fixed array, or ``fn(x)`` when given a callable.

    ``delay_s`` sleeps inside :meth:`run` to emulate model latency.
    """

    def __init__(
        self,
        output: np.ndarray | Callable[[np.ndarray], np.ndarray],
        output_shape: Shape | None = None,
        delay_s: float = 0.0,
    ):
        self._fn = output if callable(output) else None
        self._fixed = None if callable(output) else np.asarray(output, dtype=np.float32)
        if output_shape is None:
            if self._fixed is None:
                raise ValueError("output_shape is required for callable stubs")
            output_shape = self._fixed.shape
        self._output_shape = tuple(output_shape)
        self.delay_s = delay_s
        self.calls = 0

    @property
    def output_shape(self) -> Shape:
        return self._output_shape

    def run(self, x: np.ndarray) -> np.ndarray:
        self.calls += 1
        if self.delay_s:
            time.sleep(self.delay_s)
        if self._fn is not None:
            return np.asarray(self._fn(x), dtype=np.float32)
        return self._fixed.copy()


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union; 0.0 for disjoint or zero-area pairs."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def priority_order(boxes: Sequence[BoxXYXY]) -> list[int]:
    """Indices by descending confidence, ties by smaller x1 then smaller y1."""
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, boxes[i].x1, boxes[i].y1))


def nms(boxes: Sequence[BoxXYXY], iou_threshold: float) -> list[BoxXYXY]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-priority remaining box and drops every box
    whose IoU with it exceeds ``iou_threshold``. Output is in priority order.
    """
    if not boxes:
        return []
    order = np.asarray(priority_order(boxes), dtype=np.intp)
    xyxy = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)[order]
    areas = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.arange(i + 1, len(order))[alive[i + 1 :]]
        if rest.size == 0:
            continue
        iw = np.minimum(xyxy[i, 2], xyxy[rest, 2]) - np.maximum(xyxy[i, 0], xyxy[rest, 0])
        ih = np.minimum(xyxy[i, 3], xyxy[rest, 3]) - np.maximum(xyxy[i, 1], xyxy[rest, 1])
        overlap = (iw > 0.0) & (ih > 0.0)
        inter = np.where(overlap, iw * ih, 0.0)
        union = areas[i] + areas[rest] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            ious = np.where(overlap & (union > 0.0), inter / union, 0.0)
        alive[rest[ious > iou_threshold]] = False
    return [boxes[k] for k in keep]


def _channels_first(d1: int | None, d2: int | None) -> bool | None:
    if d1 == 5:
        return True
    if d2 == 5:
        return False
    if d1 is None and d2 is None:
        return None
    if d2 is None:
        return True
    if d1 is None:
        return False
    if d1 < 5 or d2 < 5:
        return d2 < 5
    return d1 <= d2


def decode_raw(output: np.ndarray, declared: Shape) -> np.ndarray:
    """Turn raw detector output into an ``(N, 5)`` array of cx, cy, w, h, score.

    Accepts ``(1, C, N)`` or ``(1, N, C)`` with ``C = 4 + num_classes``. The
    layout comes from the declared shape: a dim of exactly 5 is the channel
    axis (channel-first wins when both are 5); otherwise a fixed dim facing a
    dynamic one is the channel axis, else the smaller one that can hold five
    values. Only when both dims
    are dynamic is the actual output shape consulted. With several classes the
    best class score is used.
    """
    out = np.asarray(output, dtype=np.float32)
    if out.ndim != 3 or out.shape[0] != 1:
        raise ShapeMismatch(f"expected (1, C, N) or (1, N, C) output, got {out.shape}")
    cf = _channels_first(declared[1], declared[2])
    if cf is None:
        cf = _channels_first(out.shape[1], out.shape[2])
    rows = out[0].T if cf else out[0]
    if rows.shape[1] < 5:
        raise ShapeMismatch(f"detection rows need >= 5 values, got shape {out.shape}")
    scores = rows[:, 4:].max(axis=1)
    return np.column_stack([rows[:, :4], scores])


def detector_input(img: np.ndarray, side: int) -> tuple[np.ndarray, LetterboxMap]:
    """Letterboxed ``(1, 3, side, side)`` float32 tensor scaled to [0, 1]."""
    boxed, m = letterbox(img, side)
    x = boxed.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return np.ascontiguousarray(x), m


def detect(img: np.ndarray, backend: InferenceBackend, cfg: DetectorConfig = DetectorConfig()) -> list[BoxXYXY]:
    """Run the detector and return source-space kidney boxes.

    Rows scoring below ``cfg.conf_threshold`` or with non-positive size are
    dropped, survivors go through NMS in letterbox space, are mapped back to
    the source image (boxes collapsing there are discarded) and truncated to
    ``cfg.max_detections``.
    """
    x, m = detector_input(img, cfg.input_side)
    raw = decode_raw(backend.checked_run(x), backend.output_shape)
    keep = (raw[:, 4] >= cfg.conf_threshold) & (raw[:, 2] > 0) & (raw[:, 3] > 0)
    candidates = []
    for cx, cy, w, h, s in raw[keep].astype(np.float64):
        candidates.append(BoxXYXY(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, min(max(s, 0.0), 1.0)))
    out = []
    for box in nms(candidates, cfg.iou_threshold):
        try:
            out.append(unmap_box(box, m))
        except DegenerateBox:
            continue
    ranked = [out[i] for i in priority_order(out)]
    return ranked[: cfg.max_detections]


class ReplayFixture:
    """Recorded source-space detections keyed by image stem.

    File format is JSON Lines, one record per image::

        {"image": "<stem>", "boxes": [[x1, y1, x2, y2, conf], ...]}
    """

    def __init__(self, records: Mapping[str, Sequence[BoxXYXY]]):
        self._records = {k: tuple(v) for k, v in records.items()}

    @classmethod
    def load(cls, path: str | Path) -> "ReplayFixture":
        records: dict[str, list[BoxXYXY]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    stem = str(rec["image"])
                    boxes = [BoxXYXY.from_seq(b) for b in rec.get("boxes", [])]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad replay record: {exc}") from exc
                if stem in records:
                    raise ValueError(f"{path}:{lineno}: duplicate image {stem!r}")
                records[stem] = boxes
        return cls(records)

    @staticmethod
    def dump(records: Iterable[tuple[str, Sequence[BoxXYXY]]], path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for stem, boxes in records:
                fh.write(json.dumps({"image": stem, "boxes": [b.as_list() for b in boxes]}) + "\n")

    def __contains__(self, stem: str) -> bool:
        return stem in self._records

    def __len__(self) -> int:
        return len(self._records)

    def stems(self) -> list[str]:
        return list(self._records)

    def detect(self, stem: str, width: int, height: int, cfg: DetectorConfig = DetectorConfig()) -> list[BoxXYXY]:
        """Recorded boxes for ``stem``, clipped to the image and ranked.

        Recorded boxes are taken as already filtered; only clipping, ordering
        and the ``max_detections`` cap are applied.
        """
        if stem not in self._records:
            raise BackendError(f"no replay record for image {stem!r}")
        clipped = []
        for b in self._records[stem]:
            c = BoxXYXY(
                min(max(b.x1, 0.0), width),
                min(max(b.y1, 0.0), height),
                min(max(b.x2, 0.0), width),
                min(max(b.y2, 0.0), height),
                b.confidence,
            )
            if c.width >= 1.0 and c.height >= 1.0:
                clipped.append(c)
        return [clipped[i] for i in priority_order(clipped)][: cfg.max_detections]
