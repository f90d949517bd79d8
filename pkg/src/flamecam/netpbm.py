"""Binary Netpbm readers/writers (PGM P5, PPM P6), maxval <= 255."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _read_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; returns them plus the payload offset."""
    pos = 0
    tokens = []
    if data[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"not a binary PGM/PPM file (magic {data[:2]!r})")
    magic = data[:2]
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise NetpbmError("truncated header")
        c = data[pos:pos + 1]
        if c == b"#":  # comment to end of line
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if not m:
                raise NetpbmError(f"bad header token at byte {pos}")
            tokens.append(int(m.group()))
            pos += m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval")
    pos += 1
    width, height, maxval = tokens
    if not (0 < maxval <= 255):
        raise NetpbmError(f"unsupported maxval {maxval}")
    return magic, width, height, maxval, pos


def read_netpbm(path) -> np.ndarray:
    """Read a P5/P6 file; returns uint8 (H, W) for PGM or (H, W, 3) for PPM."""
    data = Path(path).read_bytes()
    magic, width, height, _, pos = _read_header(data)
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    payload = data[pos:pos + n]
    if len(payload) < n:
        raise NetpbmError(f"payload too short: {len(payload)} of {n} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise NetpbmError("PGM expects a 2-D array")
    if image.dtype != np.uint8:
        raise NetpbmError(f"PGM expects uint8 pixels, got {image.dtype}")
    img = np.ascontiguousarray(image)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetpbmError("PPM expects an (H, W, 3) array")
    if image.dtype != np.uint8:
        raise NetpbmError(f"PPM expects uint8 pixels, got {image.dtype}")
    img = np.ascontiguousarray(image)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())
