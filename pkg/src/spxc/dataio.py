"""Image ingestion, normalization, coordinate grids, and patch sampling.

Images are 8-bit grayscale squares read from IDX files (big-endian magic,
big-endian dimension sizes, raw row-major payload).  Pixel values map to the
network range [-1, 1] through a fixed affine transform, and every image is
paired with a grid of evenly spaced coordinate pairs over the same range.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """Raised when an IDX file violates the format contract."""


@dataclass
class ImageU8:
    """A square grayscale image with byte-valued pixels."""

    side: int
    pixels: np.ndarray  # (side, side) uint8
    label: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.side < 1:
            raise ValueError("side must be >= 1")
        if self.pixels.shape != (self.side, self.side):
            raise ValueError(f"pixels must be {self.side}x{self.side}, got {self.pixels.shape}")
        if self.label is not None and not 0 <= self.label <= 9:
            raise ValueError(f"label out of range: {self.label}")


@dataclass
class ImageF:
    """A square grayscale image with real pixels in [-1, 1]."""

    side: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (self.side, self.side):
            raise ValueError(f"pixels must be {self.side}x{self.side}, got {self.pixels.shape}")
        amax = float(np.abs(self.pixels).max()) if self.pixels.size else 0.0
        if amax > 1.0 + 1e-9:
            raise ValueError(f"pixel values must lie in [-1, 1]; max abs {amax}")


@dataclass
class CoordGrid:
    """Evenly spaced coordinate pairs covering [-1, 1] x [-1, 1].

    ``coords`` has shape (2, side, side): channel 0 varies with the row
    index, channel 1 with the column index.
    """

    side: int
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (2, self.side, self.side):
            raise ValueError(f"coords must be (2, {self.side}, {self.side})")


@dataclass
class PatchPair:
    """An m x m pixel patch with the matching slice of the coordinate grid."""

    patch_y: np.ndarray   # (m, m) normalized pixels
    patch_g: np.ndarray   # (2, m, m) coordinates
    origin: tuple[int, int]

    def __post_init__(self):
        m = self.patch_y.shape[0]
        if self.patch_y.shape != (m, m):
            raise ValueError("patch_y must be square")
        if self.patch_g.shape != (2, m, m):
            raise ValueError("patch_g must be (2, m, m)")


def _open_maybe_gz(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated file while reading {what}")
    return struct.unpack(">I", raw)[0]


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX image file into a (count, rows, cols) uint8 array."""
    with _open_maybe_gz(path) as f:
        magic = _read_be32(f, path, "magic")
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: wrong magic {magic} (expected {IMAGE_MAGIC} for images)")
        count = _read_be32(f, path, "image count")
        rows = _read_be32(f, path, "row count")
        cols = _read_be32(f, path, "column count")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise IdxFormatError(
                f"{path}: truncated payload ({len(payload)} bytes, expected {count * rows * cols})"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic = _read_be32(f, path, "magic")
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"{path}: wrong magic {magic} (expected {LABEL_MAGIC} for labels)")
        count = _read_be32(f, path, "label count")
        payload = f.read(count)
        if len(payload) != count:
            raise IdxFormatError(f"{path}: truncated payload ({len(payload)} bytes, expected {count})")
        return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path) -> list[ImageU8]:
    """Load paired IDX image/label files into a list of labeled images."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if images.shape[1] != images.shape[2]:
        raise IdxFormatError(f"non-square images: {images.shape[1]}x{images.shape[2]}")
    side = images.shape[1]
    return [ImageU8(side, img, int(lab)) for img, lab in zip(images, labels)]


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Array-shaped variant of :func:`load_idx` for batched pipelines."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels


def normalize_array(pixels) -> np.ndarray:
    """Map bytes 0..255 onto [-1, 1] via v / 127.5 - 1."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def denormalize_array(values) -> np.ndarray:
    """Inverse of :func:`normalize_array`, rounding half away from zero."""
    v = (np.asarray(values, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def normalize(img: ImageU8) -> ImageF:
    return ImageF(img.side, normalize_array(img.pixels))


def denormalize(img: ImageF) -> ImageU8:
    return ImageU8(img.side, denormalize_array(img.pixels))


def grid_axis(n: int) -> np.ndarray:
    """n evenly spaced values covering [-1, 1]; the midpoint 0 for n = 1."""
    if n < 1:
        raise ValueError("grid size must be >= 1")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def make_grid(n: int) -> CoordGrid:
    """Build the n x n grid of coordinate pairs spanning [-1, 1]."""
    axis = grid_axis(n)
    rows, cols = np.meshgrid(axis, axis, indexing="ij")
    return CoordGrid(n, np.stack([rows, cols]))


def sample_patch(img: ImageF, grid: CoordGrid, m: int, rng: np.random.Generator) -> PatchPair:
    """Cut a uniformly placed m x m window from the image and its grid.

    The origin is drawn uniformly over all fully contained placements
    (row first, then column); windows are never clamped or padded.
    """
    n = img.side
    if m > n:
        raise ValueError(f"patch side {m} exceeds image side {n}")
    if grid.side != n:
        raise ValueError("grid side must equal image side")
    r = int(rng.integers(0, n - m + 1))
    c = int(rng.integers(0, n - m + 1))
    return PatchPair(
        patch_y=img.pixels[r:r + m, c:c + m],
        patch_g=grid.coords[:, r:r + m, c:c + m],
        origin=(r, c),
    )


def all_patch_origins(n: int, m: int) -> list[tuple[int, int]]:
    """Every top-left corner of a fully contained m x m window, row-major."""
    if m > n:
        raise ValueError(f"patch side {m} exceeds image side {n}")
    return [(r, c) for r in range(n - m + 1) for c in range(n - m + 1)]
