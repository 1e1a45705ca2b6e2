"""
Dataset manifests, subject-disjoint split checks and offline augmentation.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import imaging

log = logging.getLogger(__name__)

LABELS = ("stone", "normal")
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST_COLUMNS = ("stem", "path", "label", "subject_id", "split")

_LABEL_ALIASES = {
    "stone": "stone",
    "stones": "stone",
    "kidney_stone": "stone",
    "kidneystone": "stone",
    "ks": "stone",
    "positive": "stone",
    "normal": "normal",
    "negative": "normal",
}
_SPLIT_ALIASES = {
    "train": "train",
    "training": "train",
    "val": "val",
    "valid": "val",
    "validation": "val",
    "test": "test",
    "testing": "test",
}


class ManifestError(ValueError):
    pass


class DuplicateStem(ManifestError):
    pass


class SubjectLeak(ManifestError):
    def __init__(self, subject_id: str, splits: Sequence[str]):
        self.subject_id = subject_id
        self.splits = tuple(splits)
        super().__init__(f"subject {subject_id!r} appears in splits {', '.join(self.splits)}")


def canonical_label(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in _LABEL_ALIASES:
        raise ManifestError(f"unknown label {name!r}")
    return _LABEL_ALIASES[key]


def canonical_split(name: str) -> str:
    key = name.strip().lower()
    if key not in _SPLIT_ALIASES:
        raise ManifestError(f"unknown split {name!r}")
    return _SPLIT_ALIASES[key]


@dataclass(frozen=True)
class ManifestRow:
    stem: str
    path: Path
    label: str
    split: str = "test"
    subject_id: str | None = None


@dataclass
class Manifest:
    """Rows in stem order. Stems are unique and subjects never span splits."""

    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=lambda r: r.stem)
        validate(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def __getitem__(self, i: int) -> ManifestRow:
        return self.rows[i]

    def split_sizes(self) -> dict[str, int]:
        c = Counter(r.split for r in self.rows)
        return {s: c[s] for s in SPLITS}

    def label_counts(self) -> dict[str, int]:
        c = Counter(r.label for r in self.rows)
        return {lab: c[lab] for lab in LABELS}

    def filter(self, **criteria: str) -> "Manifest":
        """Rows whose fields equal every given value, e.g. ``filter(split="train")``."""
        bad = set(criteria) - {"label", "split", "subject_id", "stem"}
        if bad:
            raise ManifestError(f"cannot filter on {sorted(bad)}")
        return Manifest([r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())])

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self.rows:
                p = r.path
                try:
                    p = p.resolve().relative_to(base)
                except ValueError:
                    pass
                w.writerow([r.stem, p.as_posix(), r.label, r.subject_id or "", r.split])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Manifest":
        """Read a manifest CSV; relative paths resolve against the CSV's directory."""
        path = Path(path)
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"stem", "path", "label"} - set(reader.fieldnames or ())
            if missing:
                raise ManifestError(f"{path}: missing columns {sorted(missing)}")
            for rec in reader:
                p = Path(rec["path"])
                if not p.is_absolute():
                    p = path.parent / p
                rows.append(
                    ManifestRow(
                        stem=rec["stem"],
                        path=p,
                        label=canonical_label(rec["label"]),
                        split=canonical_split(rec.get("split") or "test"),
                        subject_id=rec.get("subject_id") or None,
                    )
                )
        return cls(rows)


def validate(rows: Iterable[ManifestRow]) -> None:
    """Raise on duplicate stems or on a subject present in more than one split."""
    seen: set[str] = set()
    subject_splits: dict[str, set[str]] = {}
    for r in rows:
        if r.stem in seen:
            raise DuplicateStem(f"duplicate stem {r.stem!r}")
        seen.add(r.stem)
        if r.subject_id:
            subject_splits.setdefault(r.subject_id, set()).add(r.split)
    for subject in sorted(subject_splits):
        splits = subject_splits[subject]
        if len(splits) > 1:
            raise SubjectLeak(subject, sorted(splits, key=SPLITS.index))


def build_manifest(
    root: str | Path,
    layout: str = "split/label",
    subject_pattern: str | None = None,
    default_split: str = "test",
) -> Manifest:
    """Scan ``root`` for PNG/JPEG files arranged in nested directories.

    ``layout`` names the directory levels above each file, e.g.
    ``"split/label"`` for ``root/train/stone/img.png`` or just ``"label"``
    (every row then gets ``default_split``). ``subject_pattern`` is a regex
    applied to the file stem whose ``subject`` group (or first group) is the
    patient id used for the leakage check.
    """
    root = Path(root)
    levels = [p for p in layout.split("/") if p]
    if not set(levels) <= {"split", "label"} or "label" not in levels:
        raise ManifestError(f"layout must name a label level and optionally a split level: {layout!r}")
    rx = re.compile(subject_pattern) if subject_pattern else None
    rows = []
    for f in sorted(root.rglob("*")):
        if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parts = f.relative_to(root).parts[:-1]
        if len(parts) != len(levels):
            log.debug("skipping %s: does not match layout %s", f, layout)
            continue
        fields = dict(zip(levels, parts))
        subject = None
        if rx is not None:
            m = rx.search(f.stem)
            if m:
                subject = m.groupdict().get("subject") or m.group(1 if m.groups() else 0)
        rows.append(
            ManifestRow(
                stem=f.stem,
                path=f,
                label=canonical_label(fields["label"]),
                split=canonical_split(fields.get("split", default_split)),
                subject_id=subject,
            )
        )
    manifest = Manifest(rows)
    log.info("manifest: %d images, splits %s", len(manifest), manifest.split_sizes())
    return manifest


@dataclass(frozen=True)
class AugmentConfig:
    seed: int = 0
    rotate_fraction: float = 0.5
    rotate_range_deg: float = 25.0
    flip: bool = True
    target_class: str = "stone"

    def __post_init__(self) -> None:
        if not 0.0 <= self.rotate_fraction <= 1.0:
            raise ValueError("rotate_fraction must be in [0, 1]")
        if self.rotate_range_deg < 0:
            raise ValueError("rotate_range_deg is a symmetric half-range and must be >= 0")
        object.__setattr__(self, "target_class", canonical_label(self.target_class))


@dataclass
class AugmentResult:
    manifest: Manifest
    written: list[Path] = field(default_factory=list)
    # (stem, message) for inputs that could not be read or written.
    errors: list[tuple[str, str]] = field(default_factory=list)


def _write_png(img: np.ndarray, path: Path) -> None:
    path.write_bytes(imaging.encode_png(img))


def augment(rows: Iterable[ManifestRow], cfg: AugmentConfig, out: str | Path) -> AugmentResult:
    """Offline augmentation of target-class images.

    Every target-class image gets a horizontally flipped copy when
    ``cfg.flip`` is set. A seeded ``rotate_fraction`` of the target-class
    images is then rotated by a seeded uniform angle in
    ``[-rotate_range_deg, rotate_range_deg]`` (black corners). Rotation acts on
    the flipped copy when flipping is on, otherwise on a copy of the original
    that replaces it in the manifest, so it never changes the image count.
    Other classes pass through untouched.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: r.stem)
    targets = [r for r in rows if r.label == cfg.target_class]

    rng = np.random.default_rng(cfg.seed)
    n_rot = int(round(cfg.rotate_fraction * len(targets)))
    picked = rng.choice(len(targets), size=n_rot, replace=False) if n_rot else np.array([], dtype=int)
    angles = rng.uniform(-cfg.rotate_range_deg, cfg.rotate_range_deg, size=n_rot)
    rotation = {targets[int(i)].stem: float(a) for i, a in zip(picked, angles)}

    result = AugmentResult(Manifest([]))
    out_rows: list[ManifestRow] = []
    for r in rows:
        if r.label != cfg.target_class or (not cfg.flip and r.stem not in rotation):
            out_rows.append(r)
            continue
        try:
            img = imaging.decode_image(Path(r.path).read_bytes())
        except (OSError, imaging.ImagingError) as exc:
            result.errors.append((r.stem, f"read: {exc}"))
            out_rows.append(r)
            continue
        if cfg.flip:
            out_rows.append(r)
            synth, stem = imaging.hflip(img), f"{r.stem}_hflip"
        else:
            synth, stem = img, r.stem
        if r.stem in rotation:
            synth = imaging.rotate(synth, rotation[r.stem])
            stem = f"{stem}_rot"
        dest = out / f"{stem}.png"
        try:
            _write_png(synth, dest)
        except OSError as exc:
            result.errors.append((r.stem, f"write: {exc}"))
            if not cfg.flip:
                out_rows.append(r)
            continue
        result.written.append(dest)
        out_rows.append(replace(r, stem=stem, path=dest))
    result.manifest = Manifest(out_rows)
    for stem, msg in result.errors:
        log.error("augment %s: %s", stem, msg)
    return result


def content_hashes(paths: Iterable[str | Path]) -> set[tuple[str, str]]:
    """``(filename, sha256)`` pairs, used to compare augmentation runs."""
    return {(Path(p).name, hashlib.sha256(Path(p).read_bytes()).hexdigest()) for p in paths}
