"""Image file I/O: binary PPM (P6, 8-bit) read/write, optional PNG read
via Pillow, and atomic file writing used by every writer in the package.

8-bit values map to [0, 1] as v / 255; writing rounds to nearest and is
the exact inverse, so a read-write cycle is byte-identical.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

IMAGE_SUFFIXES = (".ppm", ".png")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_ppm_tokens(raw: bytes, path) -> tuple[list[int], int]:
    """Parse the P6 header: three decimal fields, '#' comments allowed."""
    pos = 2  # after magic
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise DataError(f"{path}: malformed PPM header") from None
    return fields, pos + 1  # single whitespace byte after maxval


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into float64 HxWx3 in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    (width, height, maxval), data_off = _read_ppm_tokens(raw, path)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = width * height * 3
    pixels = raw[data_off:data_off + need]
    if len(pixels) != need:
        raise DataError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def write_ppm(path, planes: np.ndarray) -> None:
    """Write HxWx3 values in [0, 1] as binary PPM (rounded to 8 bits)."""
    planes = np.asarray(planes)
    if planes.ndim != 3 or planes.shape[2] != 3:
        raise DataError(f"write_ppm: expected HxWx3 array, got {planes.shape}")
    q = np.clip(np.rint(planes * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{planes.shape[1]} {planes.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def read_png(path) -> np.ndarray:
    """Read a PNG via Pillow (optional dependency, 'png' extra)."""
    try:
        from PIL import Image
    except ImportError:
        raise DataError(
            "PNG support requires Pillow (install the 'png' extra)") from None
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_image(path) -> np.ndarray:
    """Read an image by suffix into float64 HxWx3 in [0, 1]."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise DataError(f"{path}: unsupported image format {suffix!r}")
