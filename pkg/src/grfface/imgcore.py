"""Image planes, 2-D convolution, and summed-area tables.

A plane is a plain 2-D float64 ndarray indexed [y, x]; all filtering and
pooling in the package runs on this representation. Raster math is done in
64-bit floats; the on-disk float format is 32-bit and the conversion is
explicit at the I/O boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# border policy -> scipy.ndimage mode
_BORDER_MODES = {"replicate": "nearest", "reflect": "reflect"}


def as_plane(values, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Validate and return a float64 image plane.

    Accepts a 2-D array, or a flat row-major sequence together with
    ``width`` and ``height``.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        if width is None or height is None:
            raise ValueError("flat values need explicit width and height")
        if arr.size != width * height:
            raise ValueError(f"values length {arr.size} != {width}*{height}")
        arr = arr.reshape(height, width)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("plane must be 2-D with positive size")
    if not np.all(np.isfinite(arr)):
        raise ValueError("plane contains non-finite values")
    return arr


@dataclass(frozen=True)
class Kernel2D:
    """Square odd-sized convolution kernel, optionally separable.

    ``factors`` is ``(fy, fx)`` with ``outer(fy, fx)`` equal to ``taps``;
    when present the separable convolution path is used.
    """

    taps: np.ndarray
    factors: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValueError("kernel taps must be square with odd side length")
        if self.factors is not None:
            fy = np.asarray(self.factors[0], dtype=np.float64)
            fx = np.asarray(self.factors[1], dtype=np.float64)
            object.__setattr__(self, "factors", (fy, fx))
            if np.max(np.abs(np.outer(fy, fx) - taps)) > 1e-12:
                raise ValueError("separable factors do not reproduce taps")

    @property
    def half_width(self) -> int:
        return self.taps.shape[0] // 2


def convolve(image: np.ndarray, kernel: Kernel2D, border: str = "replicate") -> np.ndarray:
    """2-D convolution (kernel flipped) with edge handling, same-size output.

    Uses the separable two-pass path when the kernel carries factors,
    otherwise a direct 2-D pass. Border policies: ``replicate`` clamps to
    the edge pixel, ``reflect`` mirrors about the image boundary.
    """
    if border not in _BORDER_MODES:
        raise ValueError(f"unknown border policy {border!r}")
    mode = _BORDER_MODES[border]
    side = kernel.taps.shape[0]
    if side > image.shape[0] or side > image.shape[1]:
        raise ValueError(
            f"kernel-exceeds-image: {side}x{side} kernel on "
            f"{image.shape[1]}x{image.shape[0]} image"
        )
    if kernel.factors is not None:
        fy, fx = kernel.factors
        rows = ndimage.convolve1d(image, fx, axis=1, mode=mode)
        return ndimage.convolve1d(rows, fy, axis=0, mode=mode)
    return ndimage.convolve(image, kernel.taps, mode=mode)


class IntegralImage:
    """Exclusive summed-area table: ``table[y, x]`` sums values above and
    left of (x, y), so row 0 and column 0 are zero."""

    def __init__(self, image: np.ndarray):
        h, w = image.shape
        table = np.zeros((h + 1, w + 1), dtype=np.float64)
        np.cumsum(np.cumsum(image, axis=0), axis=1, out=table[1:, 1:])
        self.table = table

    def rect_sum(self, x0: int, y0: int, x1: int, y1: int) -> float:
        """Sum of the half-open rectangle [x0, x1) x [y0, y1)."""
        t = self.table
        return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])


def integral(image: np.ndarray) -> IntegralImage:
    return IntegralImage(image)


# ---------------------------------------------------------------------------
# File formats: binary PGM (P5, maxval 255) and a raw float32 plane ("IPLN").

def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a plane with values in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ValueError(f"not a binary PGM file: magic {magic!r}")
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    """Write a plane to binary PGM, quantizing [0, 1] to 8 bits."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_IPLN_MAGIC = b"IPLN"


def read_plane(path) -> np.ndarray:
    """Read the raw float plane format (magic, u32 w, u32 h, w*h float32 LE)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != _IPLN_MAGIC:
            raise ValueError("not an IPLN plane file")
        w, h = struct.unpack("<II", head[4:])
        raw = np.frombuffer(fh.read(4 * w * h), dtype="<f4")
    if raw.size != w * h:
        raise ValueError("truncated IPLN plane file")
    return raw.reshape(h, w).astype(np.float64)


def write_plane(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(_IPLN_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
