"""
File codecs for dense grids.

Middlebury .flo for flow fields, grayscale PFM for depth and ratio maps,
8-bit PGM (255 = valid) for masks. All functions work on plain arrays so
they stay independent of the geometry types.
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .errors import FileFormatError

PathLike = Union[str, Path]

FLO_MAGIC = b"PIEH"
# Middlebury "unknown flow" marker
FLO_UNKNOWN = 1e10
FLO_UNKNOWN_THRESHOLD = 1e9


def write_flo(path: PathLike, vectors: np.ndarray, valid: np.ndarray) -> None:
    """
    Write a flow field; invalid pixels carry the unknown-flow value.

    Args:
        path: Output file
        vectors: Flow, shape (H, W, 2)
        valid: Mask, shape (H, W)
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    height, width = vectors.shape[:2]
    data = np.where(np.asarray(valid, dtype=bool)[..., None], vectors, FLO_UNKNOWN)

    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([width, height], dtype="<i4").tobytes())
        f.write(data.astype("<f4").tobytes())


def read_flo(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a .flo file.

    Returns:
        Flow vectors (H, W, 2) as float64 and the validity mask

    Raises:
        FileFormatError: Bad magic, header or payload size
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLO_MAGIC:
            raise FileFormatError(path, "not a .flo file (bad magic)")
        header = f.read(8)
        if len(header) != 8:
            raise FileFormatError(path, "truncated .flo header")
        width, height = (int(x) for x in np.frombuffer(header, dtype="<i4"))
        if width <= 0 or height <= 0:
            raise FileFormatError(path, f"invalid .flo size {width}x{height}")
        payload = f.read()

    expected = width * height * 2 * 4
    if len(payload) != expected:
        raise FileFormatError(path, f".flo payload has {len(payload)} bytes, expected {expected}")

    vectors = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2).astype(np.float64)
    valid = np.all(np.isfinite(vectors) & (np.abs(vectors) < FLO_UNKNOWN_THRESHOLD), axis=-1)
    return np.where(valid[..., None], vectors, 0.0), valid


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Write a grayscale little-endian PFM; rows are stored bottom to top."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PFM writer expects a single-channel grid")
    height, width = values.shape

    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(values).astype("<f4").tobytes())


def _read_token_line(f, path: PathLike) -> str:
    line = f.readline()
    if not line:
        raise FileFormatError(path, "truncated PFM header")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path: PathLike) -> np.ndarray:
    """
    Read a grayscale PFM into a float64 (H, W) array.

    Raises:
        FileFormatError: Color PFM, malformed header or wrong payload size
    """
    with open(path, "rb") as f:
        kind = _read_token_line(f, path)
        if kind == "PF":
            raise FileFormatError(path, "color PFM is not supported")
        if kind != "Pf":
            raise FileFormatError(path, "not a PFM file")
        try:
            width, height = (int(x) for x in _read_token_line(f, path).split())
            scale = float(_read_token_line(f, path))
        except ValueError:
            raise FileFormatError(path, "malformed PFM header")
        payload = f.read()

    if width <= 0 or height <= 0 or scale == 0:
        raise FileFormatError(path, "invalid PFM size or scale")
    expected = width * height * 4
    if len(payload) != expected:
        raise FileFormatError(path, f"PFM payload has {len(payload)} bytes, expected {expected}")

    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(values).astype(np.float64)


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    """Write a boolean mask as 8-bit PGM, 255 = valid."""
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_mask(path: PathLike) -> np.ndarray:
    """Read an 8-bit mask; values above 127 are valid."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("L"))
    except (OSError, ValueError) as e:
        raise FileFormatError(path, f"unreadable mask image ({e})")
    return pixels > 127


def read_image(path: PathLike) -> np.ndarray:
    """Read an 8-bit image as floats in [0, 1]; color images keep their channels."""
    try:
        with Image.open(path) as image:
            if image.mode not in ("L", "RGB"):
                image = image.convert("RGB")
            pixels = np.asarray(image, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise FileFormatError(path, f"unreadable image ({e})")
    return pixels / 255.0
