"""Raster data model and bit-exact file I/O.

Images travel as binary portable pixmaps (P6, maxval 255), label masks as
binary portable graymaps (P5, maxval 255, value 255 reserved for void), and
arbitrary float arrays as a small native tensor container:

    magic "CDAT" | u8 version=1 | u8 rank | rank x u32 LE dims | f32 LE payload

Tensor payloads round-trip bit-exactly; images are quantized to the 1/255
grid with round-half-up.  Datasets live on disk as
``<root>/<split>/img_%05d.ppm`` + ``lab_%05d.pgm`` plus a ``manifest.txt``
with one id per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .validation import check_image_array, check_labels_array

VOID_LABEL = 255

TENSOR_MAGIC = b"CDAT"
TENSOR_VERSION = 1


class PnmFormatError(ValueError):
    """Malformed P5/P6 content; carries the byte offset of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class LabelRangeError(ValueError):
    """Mask entry outside [0, C-1] and not the void value."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image:
    """An (H, W, F) raster of finite values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", check_image_array(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class indices over ``num_classes`` classes.

    ``void_value`` marks unscored pixels; they are excluded from every loss
    and metric downstream.
    """

    labels: np.ndarray
    num_classes: int
    void_value: int = VOID_LABEL

    def __post_init__(self):
        labels = np.asarray(self.labels)
        check_labels_array(labels, self.num_classes, self.void_value)
        object.__setattr__(self, "labels", labels.astype(np.int32))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def valid(self) -> np.ndarray:
        """Boolean (H, W) map of non-void pixels."""
        return self.labels != self.void_value

    def one_hot(self) -> np.ndarray:
        """(H, W, C) 0/1 expansion; void pixels stay all-zero."""
        out = np.zeros(self.labels.shape + (self.num_classes,))
        valid = self.valid()
        rows, cols = np.nonzero(valid)
        out[rows, cols, self.labels[rows, cols]] = 1.0
        return out


@dataclass
class Dataset:
    """Ordered (image, optional mask) pairs plus per-item identifiers."""

    items: list[tuple[Image, Optional[LabelMask]]]
    num_classes: int
    domain_tag: str = "source"
    manifest: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.manifest:
            self.manifest = [f"{i:05d}" for i in range(len(self.items))]
        if len(self.manifest) != len(self.items):
            raise ValueError("manifest length does not match item count")
        for _, mask in self.items:
            if mask is not None and mask.num_classes != self.num_classes:
                raise ValueError("mask num_classes disagrees with dataset")

    def __len__(self) -> int:
        return len(self.items)

    def images(self) -> list[Image]:
        return [img for img, _ in self.items]

    def masks(self) -> list[Optional[LabelMask]]:
        return [mask for _, mask in self.items]

    def without_masks(self) -> "Dataset":
        """A copy with every mask dropped (target-domain training view)."""
        return Dataset(items=[(img, None) for img, _ in self.items],
                       num_classes=self.num_classes,
                       domain_tag=self.domain_tag,
                       manifest=list(self.manifest))


# ---------------------------------------------------------------------------
# Portable pixmap / graymap I/O
# ---------------------------------------------------------------------------

def _parse_pnm(buf: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse a single-whitespace-separated PNM header.

    Returns (width, height, payload offset); maxval must be 255.
    """
    if buf[:2] != magic:
        raise PnmFormatError(path, 0, f"expected magic {magic.decode()}")
    pos = 2
    values = []
    offsets = []
    for _ in range(3):
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PnmFormatError(path, start, "expected a decimal integer in header")
        values.append(int(buf[start:pos]))
        offsets.append(start)
    if values[2] != 255:
        raise PnmFormatError(path, offsets[2], f"maxval must be 255, got {values[2]}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmFormatError(path, pos, "expected single whitespace before payload")
    pos += 1
    width, height = values[0], values[1]
    if width < 1 or height < 1:
        raise PnmFormatError(path, offsets[0], f"degenerate dimensions {width}x{height}")
    return width, height, pos


def _read_payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    payload = buf[offset:offset + count]
    if len(payload) < count:
        raise PnmFormatError(path, offset + len(payload),
                             f"truncated payload: expected {count} bytes")
    return np.frombuffer(payload, dtype=np.uint8)


def load_image(path) -> Image:
    """Read a P6 pixmap (or a rank-3 CDAT tensor) into an Image."""
    buf = Path(path).read_bytes()
    if buf[:4] == TENSOR_MAGIC:
        values = load_tensor(path)
        if values.ndim != 3:
            raise PnmFormatError(path, 5, f"tensor rank {values.ndim} is not an image")
        return Image(np.asarray(values, dtype=np.float64))
    width, height, offset = _parse_pnm(buf, b"P6", path)
    raw = _read_payload(buf, offset, width * height * 3, path)
    data = raw.reshape(height, width, 3).astype(np.float64) / 255.0
    return Image(data)


def save_image(img: Image, path) -> None:
    """Write a 3-channel Image as P6, quantized with round-half-up."""
    if img.channels != 3:
        raise ValueError(f"P6 output requires 3 channels, got {img.channels}; "
                         "use save_tensor for other channel counts")
    quantized = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())


def load_mask(path, num_classes: int) -> LabelMask:
    """Read a P5 graymap of class indices; 255 is void."""
    buf = Path(path).read_bytes()
    width, height, offset = _parse_pnm(buf, b"P5", path)
    raw = _read_payload(buf, offset, width * height, path)
    labels = raw.reshape(height, width)
    bad = (labels >= num_classes) & (labels != VOID_LABEL)
    if bad.any():
        rows, cols = np.nonzero(bad)
        raise LabelRangeError(
            f"{path}: label {labels[rows[0], cols[0]]} at ({rows[0]}, {cols[0]}) "
            f"outside [0, {num_classes - 1}] and not void")
    return LabelMask(labels, num_classes)


def save_mask(mask: LabelMask, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + mask.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Native tensor container
# ---------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, values: np.ndarray) -> None:
    """Append one tensor record (f32 LE, row-major) to an open stream."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds u8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    header = fh.read(6)
    if len(header) < 6 or header[:4] != TENSOR_MAGIC:
        raise ValueError("not a CDAT tensor record")
    version, rank = header[4], header[5]
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(values: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, values)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, root, split: str) -> Path:
    """Write a dataset split under ``<root>/<split>/``."""
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(ds.items):
        save_image(img, out / f"img_{i:05d}.ppm")
        if mask is not None:
            save_mask(mask, out / f"lab_{i:05d}.pgm")
    (out / "manifest.txt").write_text("\n".join(ds.manifest) + "\n")
    return out


def load_dataset(root, split: str, num_classes: int, domain_tag: str = "source",
                 with_masks: bool = True) -> Dataset:
    base = Path(root) / split
    manifest = (base / "manifest.txt").read_text().split()
    items: list[tuple[Image, Optional[LabelMask]]] = []
    for i in range(len(manifest)):
        img = load_image(base / f"img_{i:05d}.ppm")
        mask_path = base / f"lab_{i:05d}.pgm"
        mask = load_mask(mask_path, num_classes) if with_masks and mask_path.exists() else None
        items.append((img, mask))
    return Dataset(items=items, num_classes=num_classes,
                   domain_tag=domain_tag, manifest=manifest)
