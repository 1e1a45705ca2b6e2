"""
Pixel and geometry primitives.

Images are plain ``numpy`` arrays of shape ``(H, W, 3)`` and dtype ``uint8``
in RGB order. Boxes are :class:`BoxXYXY` in pixel coordinates.

Functions:
    decode_image: Decode PNG/JPEG bytes into an RGB array
    encode_png: Encode an RGB array as PNG bytes
    letterbox: Aspect-preserving resize into a padded square
    map_box / unmap_box: Move boxes between source and letterbox space
    mirror_box: Reflect a box across the vertical centerline
    crop: Cut an outward-rounded box out of an image
    normalize: Resize, scale and standardize into a CHW float tensor
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

# Channel statistics used by the classifier input transform.
IMAGENET_MEAN: tuple[float, float, float] = (0.485, 0.456, 0.406)
IMAGENET_STD: tuple[float, float, float] = (0.229, 0.224, 0.225)

LETTERBOX_FILL = 114

# Coordinates live on a 2**-20 px grid; with integer image widths below 2**32
# the reflection W - x is then exact in float64, so mirroring is an involution.
_GRID = float(2**20)

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


class ImagingError(ValueError):
    """Base class for pixel/geometry failures."""


class DecodeError(ImagingError):
    pass


class UnsupportedFormat(ImagingError):
    pass


class DegenerateBox(ImagingError):
    pass


class EmptyCrop(ImagingError):
    pass


def _snap(v: float) -> float:
    return round(float(v) * _GRID) / _GRID


@dataclass(frozen=True)
class BoxXYXY:
    """Axis-aligned box ``(x1, y1, x2, y2)`` with a confidence score.

    Construction canonicalizes the corners (so ``x1 <= x2`` and ``y1 <= y2``)
    and snaps coordinates to a fine sub-pixel grid.
    """

    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        x1, x2 = sorted((_snap(self.x1), _snap(self.x2)))
        y1, y2 = sorted((_snap(self.y1), _snap(self.y2)))
        conf = float(self.confidence)
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2, conf)):
            raise ValueError(f"non-finite box: {self!r}")
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "y2", y2)
        object.__setattr__(self, "confidence", conf)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2, self.confidence]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BoxXYXY":
        if len(values) == 4:
            return cls(*values)
        if len(values) == 5:
            return cls(*values[:4], confidence=values[4])
        raise ValueError(f"expected 4 or 5 values, got {len(values)}")


@dataclass(frozen=True)
class LetterboxMap:
    """Affine map from source pixels to letterbox pixels: ``dst = src * scale + pad``."""

    scale: float
    pad_x: float
    pad_y: float
    src_w: int
    src_h: int
    dst_w: int
    dst_h: int

    @classmethod
    def for_sizes(cls, src_w: int, src_h: int, dst_w: int, dst_h: int) -> "LetterboxMap":
        scale = min(dst_w / src_w, dst_h / src_h)
        return cls(
            scale=scale,
            pad_x=(dst_w - scale * src_w) / 2,
            pad_y=(dst_h - scale * src_h) / 2,
            src_w=src_w,
            src_h=src_h,
            dst_w=dst_w,
            dst_h=dst_h,
        )


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an RGB uint8 ``(H, W, 3)`` array and return it unchanged."""
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise TypeError("expected a uint8 numpy array")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image {img.shape}")
    return img


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG or JPEG bytes into an RGB uint8 array.

    Grayscale (and palette / alpha) sources are converted to three channels.
    16-bit grayscale PNGs are reduced to 8 bits by dropping the low byte.

    Raises:
        UnsupportedFormat: if the bytes are neither PNG nor JPEG.
        DecodeError: if the stream is malformed or truncated.
    """
    if data.startswith(_PNG_MAGIC):
        fmt = "PNG"
    elif data.startswith(_JPEG_MAGIC):
        fmt = "JPEG"
    else:
        raise UnsupportedFormat("not a PNG or JPEG stream")
    try:
        with Image.open(io.BytesIO(data), formats=[fmt]) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im).astype(np.uint32) >> 8
                im = Image.fromarray(arr.clip(0, 255).astype(np.uint8), mode="L")
            rgb = im.convert("RGB")
            out = np.array(rgb, dtype=np.uint8)
    except (OSError, SyntaxError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode {fmt}: {exc}") from exc
    return out


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(check_image(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def resize_bilinear(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Plain bilinear resize (no antialias filter)."""
    if img.shape[1] == width and img.shape[0] == height:
        return img.copy()
    return cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR)


def letterbox(
    img: np.ndarray, dst: int, fill: int = LETTERBOX_FILL
) -> tuple[np.ndarray, LetterboxMap]:
    """Resize ``img`` into a ``dst x dst`` square, keeping aspect ratio.

    The resized content is centered and the border filled with ``fill``.
    The returned map describes the forward transform; use :func:`unmap_box`
    to bring detections back to source pixels.

    >>> out, m = letterbox(np.zeros((480, 640, 3), np.uint8), 640)
    >>> (m.scale, m.pad_x, m.pad_y)
    (1.0, 0.0, 80.0)
    """
    check_image(img)
    if dst < 1:
        raise ValueError("dst must be >= 1")
    src_h, src_w = img.shape[:2]
    m = LetterboxMap.for_sizes(src_w, src_h, dst, dst)
    new_w = min(dst, max(1, int(round(src_w * m.scale))))
    new_h = min(dst, max(1, int(round(src_h * m.scale))))
    resized = resize_bilinear(img, new_w, new_h)
    canvas = np.full((dst, dst, 3), fill, dtype=np.uint8)
    left = (dst - new_w) // 2
    top = (dst - new_h) // 2
    canvas[top : top + new_h, left : left + new_w] = resized
    return canvas, m


def map_box(box: BoxXYXY, m: LetterboxMap) -> BoxXYXY:
    """Source space to letterbox space."""
    return BoxXYXY(
        box.x1 * m.scale + m.pad_x,
        box.y1 * m.scale + m.pad_y,
        box.x2 * m.scale + m.pad_x,
        box.y2 * m.scale + m.pad_y,
        box.confidence,
    )


def unmap_box(box: BoxXYXY, m: LetterboxMap) -> BoxXYXY:
    """Letterbox space to source space, clamped to the source image.

    Raises:
        DegenerateBox: if clamping leaves less than one pixel of width or height.
    """
    x1 = min(max((box.x1 - m.pad_x) / m.scale, 0.0), m.src_w)
    y1 = min(max((box.y1 - m.pad_y) / m.scale, 0.0), m.src_h)
    x2 = min(max((box.x2 - m.pad_x) / m.scale, 0.0), m.src_w)
    y2 = min(max((box.y2 - m.pad_y) / m.scale, 0.0), m.src_h)
    # slack covers grid snapping divided by small scales (1 px box round trip)
    if x2 - x1 < 1.0 - 1e-3 or y2 - y1 < 1.0 - 1e-3:
        raise DegenerateBox(f"box {box.as_list()} collapses after unmapping")
    return BoxXYXY(x1, y1, x2, y2, box.confidence)


def mirror_box(box: BoxXYXY, image_width: int) -> BoxXYXY:
    """Reflect ``box`` across the vertical line ``x = image_width / 2``."""
    w = float(image_width)
    return BoxXYXY(w - box.x2, box.y1, w - box.x1, box.y2, box.confidence)


def crop_rect(box: BoxXYXY, width: int, height: int) -> tuple[int, int, int, int]:
    """Outward-rounded integer rectangle of ``box`` clipped to the image."""
    c0 = max(0, math.floor(box.x1))
    r0 = max(0, math.floor(box.y1))
    c1 = min(width, math.ceil(box.x2))
    r1 = min(height, math.ceil(box.y2))
    if c1 <= c0 or r1 <= r0:
        raise EmptyCrop(f"box {box.as_list()} does not intersect {width}x{height} image")
    return c0, r0, c1, r1


def crop(img: np.ndarray, box: BoxXYXY) -> np.ndarray:
    """Copy of the pixels covered by ``box`` (floor/ceil, clipped)."""
    check_image(img)
    c0, r0, c1, r1 = crop_rect(box, img.shape[1], img.shape[0])
    return img[r0:r1, c0:c1].copy()


def normalize(
    img: np.ndarray,
    size: int,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> np.ndarray:
    """Resize to ``size x size`` and standardize to a ``(3, size, size)`` float32 tensor.

    Each value is ``(p / 255 - mean[c]) / std[c]`` for the resized pixel ``p``,
    evaluated in float64 and rounded once to float32.
    """
    check_image(img)
    if size < 1:
        raise ValueError("size must be >= 1")
    resized = resize_bilinear(img, size, size)
    mean_ = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std_ = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    chw = resized.transpose(2, 0, 1).astype(np.float64)
    return np.ascontiguousarray(((chw / 255.0 - mean_) / std_).astype(np.float32))


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center (counter-clockwise), same size, black corners."""
    check_image(img)
    h, w = img.shape[:2]
    mat = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), float(angle_deg), 1.0)
    return cv2.warpAffine(
        img,
        mat,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=(0, 0, 0),
    )
