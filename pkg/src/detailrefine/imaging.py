"""Pixel-space primitives: images, region masks, crops, composites, tiling and PNG I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with float values in
``[0, 1]``.  Masks use ``1 = inside the refinement region``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

from .errors import BoundaryError, EmptyRegionError, ImageFormatError, ShapeError


class Rect(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)


def as_image(data, channels: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a float64 ``(H, W, C)`` array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ShapeError(f"expected {channels} channels, got {arr.shape[2]}")
    return arr


def solid(height: int, width: int, color, channels: int = 3) -> np.ndarray:
    img = np.empty((height, width, channels), dtype=np.float64)
    img[...] = np.asarray(color, dtype=np.float64).reshape(-1)[:channels]
    return img


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Binary region mask; ``bits`` is a boolean ``(H, W)`` array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_rect(cls, height: int, width: int, rect: Rect) -> "RegionMask":
        _check_inside(rect, height, width)
        bits = np.zeros((height, width), dtype=bool)
        bits[rect.slices()] = True
        return cls(bits)

    @classmethod
    def full(cls, height: int, width: int) -> "RegionMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def bbox(self) -> Rect:
        if not self.bits.any():
            raise EmptyRegionError("empty mask has no bounding box")
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        top, left = int(rows[0]), int(cols[0])
        return Rect(top, left, int(rows[-1]) - top + 1, int(cols[-1]) - left + 1)

    def complement(self) -> "RegionMask":
        return RegionMask(~self.bits)

    def background_polarity(self) -> np.ndarray:
        """Float mask with 0 inside the region and 1 in the background."""
        return (~self.bits).astype(np.float64)

    def __eq__(self, other) -> bool:
        return isinstance(other, RegionMask) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class PatchSet:
    patch_size: int
    windows: tuple[Rect, ...]

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


def _check_inside(rect: Rect, height: int, width: int) -> None:
    if rect.height < 1 or rect.width < 1:
        raise BoundaryError(f"degenerate rect {rect}")
    if rect.top < 0 or rect.left < 0 or rect.bottom > height or rect.right > width:
        raise BoundaryError(f"rect {tuple(rect)} outside {height}x{width} image")


def crop(img: np.ndarray, rect: Rect) -> np.ndarray:
    rect = Rect(*rect)
    _check_inside(rect, img.shape[0], img.shape[1])
    return img[rect.slices()].copy()


def composite(patch: np.ndarray, base: np.ndarray, rect: Rect) -> np.ndarray:
    """Paste ``patch`` into a copy of ``base`` at ``rect``."""
    rect = Rect(*rect)
    _check_inside(rect, base.shape[0], base.shape[1])
    if patch.shape != (rect.height, rect.width) + base.shape[2:]:
        raise ShapeError(f"patch shape {patch.shape} does not fit rect {tuple(rect)} of base {base.shape}")
    out = base.copy()
    out[rect.slices()] = patch
    return out


def composite_masked(src: np.ndarray, base: np.ndarray, mask: RegionMask) -> np.ndarray:
    """Take ``src`` inside the mask and ``base`` everywhere else."""
    if src.shape != base.shape or mask.bits.shape != base.shape[:2]:
        raise ShapeError(f"shapes differ: src {src.shape}, base {base.shape}, mask {mask.bits.shape}")
    out = base.copy()
    out[mask.bits] = src[mask.bits]
    return out


def tile_region(mask: RegionMask, patch_size: int) -> PatchSet:
    """Cover the mask's bounding box with a grid of non-overlapping windows.

    The grid is anchored at the box's top-left corner; windows on the
    trailing row/column are clipped to the box rather than padded.
    """
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if mask.area == 0:
        raise EmptyRegionError("cannot tile an empty region")
    box = mask.bbox
    windows = []
    for top in range(box.top, box.bottom, patch_size):
        for left in range(box.left, box.right, patch_size):
            windows.append(Rect(top, left, min(patch_size, box.bottom - top), min(patch_size, box.right - left)))
    return PatchSet(patch_size, tuple(windows))


# -- PNG I/O -----------------------------------------------------------------


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    """Round ``v * 255`` to the nearest integer, ties going down."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    q = np.ceil(np.clip(img, 0.0, 1.0) * 255.0 - 0.5)
    return q.astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    img = as_image(img)
    q = quantize_8bit(img)
    mode = "L" if q.shape[2] == 1 else "RGB"
    pil = PILImage.fromarray(q[:, :, 0] if mode == "L" else q, mode=mode)
    pil.save(Path(path), format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    try:
        pil = PILImage.open(Path(path))
        pil.load()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if pil.format != "PNG":
        raise ImageFormatError(f"{path}: not a PNG file ({pil.format})")
    if pil.mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported PNG mode {pil.mode!r}; need 8-bit L or RGB")
    arr = np.asarray(pil, dtype=np.uint8)
    return as_image(arr.astype(np.float64) / 255.0)


def save_mask(path, mask: RegionMask) -> None:
    PILImage.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L").save(Path(path), format="PNG")


def load_mask(path) -> RegionMask:
    img = load_png(path)
    if img.shape[2] != 1:
        raise ImageFormatError(f"{path}: mask must be single-channel")
    return RegionMask(img[:, :, 0] >= 0.5)


def masked_mse(a: np.ndarray, b: np.ndarray, mask: RegionMask) -> float:
    """Mean over masked pixels of the channel-averaged squared error."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask.area == 0:
        raise EmptyRegionError("masked MSE over an empty region")
    err = ((a - b) ** 2).mean(axis=2)
    return float(err[mask.bits].sum() / mask.area)


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype="<f8").tobytes()).hexdigest()[:16]
