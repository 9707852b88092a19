"""Image and tensor I/O, plus the color conversions used by segmentation and entropy.

Images are kept as ``(H, W, C)`` numpy arrays wrapped in :class:`Image` so the
color space travels with the pixels.  Tensors use a tiny little-endian binary
container (magic ``SPCT``) that several tensors can be concatenated into.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SPCT"


class FormatError(ValueError):
    """Raised for malformed image or tensor files."""


class Space(str, enum.Enum):
    RGB8 = "RGB8"
    LAB = "LAB"
    HUE = "HUE"
    GRAY = "GRAY"


@dataclass(eq=False)
class Image:
    """A raster with an explicit color space.

    ``data`` has shape ``(height, width, channels)``.  RGB8/GRAY rasters hold
    uint8 values, LAB and HUE hold float64.
    """

    data: np.ndarray
    space: Space

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"bad image shape {self.data.shape}")
        self.space = Space(self.space)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.space == other.space
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @classmethod
    def rgb(cls, data) -> "Image":
        return cls(np.asarray(data, dtype=np.uint8), Space.RGB8)

    @classmethod
    def gray(cls, data) -> "Image":
        return cls(np.asarray(data, dtype=np.uint8), Space.GRAY)


# --------------------------------------------------------------------------
# PPM / PGM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header")
    return buf[start:pos], pos


def read_ppm(path) -> Image:
    """Read a binary P6 (RGB) or P5 (gray) file with maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PPM/PGM file (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad header field {tok!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError("non-positive image dimensions")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = buf[pos : pos + size]
    if len(payload) < size:
        raise OSError(f"truncated payload: expected {size} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()
    return Image(data, Space.RGB8 if channels == 3 else Space.GRAY)


def _write_pnm(image: Image, path, magic: bytes, space: Space) -> None:
    if image.space != space:
        raise ValueError(f"space mismatch: expected {space.value}, got {image.space.value}")
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(image.data, dtype=np.uint8).tobytes())


def write_ppm(image: Image, path) -> None:
    _write_pnm(image, path, b"P6", Space.RGB8)


def write_pgm(image: Image, path) -> None:
    _write_pnm(image, path, b"P5", Space.GRAY)


# --------------------------------------------------------------------------
# color conversions

# IEC 61966-2-1 linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)


def _require(image: Image, space: Space) -> None:
    if image.space != space:
        raise ValueError(f"space mismatch: expected {space.value}, got {image.space.value}")


def srgb_to_lab_array(rgb: np.ndarray) -> np.ndarray:
    """Convert an ``(..., 3)`` array of sRGB values in [0, 1] to CIE Lab."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def rgb_to_lab(image: Image) -> Image:
    _require(image, Space.RGB8)
    return Image(srgb_to_lab_array(image.data / 255.0), Space.LAB)


def hue_array(rgb: np.ndarray) -> np.ndarray:
    """HSV hue in [0, 1) for an ``(..., 3)`` array; achromatic pixels get 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    # (g-b)/delta % 6 can round to exactly 6.0 for tiny negative inputs
    return np.where(h >= 1.0, 0.0, h)


def rgb_to_hue(image: Image) -> Image:
    _require(image, Space.RGB8)
    return Image(hue_array(image.data.astype(np.float64))[:, :, None], Space.HUE)


def to_gray(image: Image) -> Image:
    """Luma (Rec. 601) of an RGB8 image, rounded to uint8."""
    _require(image, Space.RGB8)
    y = image.data.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return Image.gray(np.clip(np.round(y), 0, 255))


# --------------------------------------------------------------------------
# SPCT tensor container


def write_tensor_to(fh: BinaryIO, tensor) -> int:
    """Append one tensor record to an open binary stream; returns bytes written."""
    arr = np.array(tensor, dtype="<f4", order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor_from(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated rank")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated shape")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"payload size mismatch: shape {shape} needs {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_tensor(tensor, path) -> None:
    with open(path, "wb") as fh:
        write_tensor_to(fh, tensor)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return arr


def write_tensors(named: dict[str, np.ndarray], path) -> dict[str, int]:
    """Write several tensors back to back; returns the name -> byte offset manifest."""
    offsets = {}
    with open(path, "wb") as fh:
        pos = 0
        for name, arr in named.items():
            offsets[name] = pos
            pos += write_tensor_to(fh, arr)
    return offsets


def read_tensors(path, offsets: dict[str, int]) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        for name, off in offsets.items():
            fh.seek(off)
            out[name] = read_tensor_from(fh)
    return out
