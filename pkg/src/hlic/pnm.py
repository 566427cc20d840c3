"""Binary PGM (P5) / PPM (P6) reading and PGM writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import Image

LUMA = (0.299, 0.587, 0.114)


class PnmError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})" if offset is not None else msg)


def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    fields: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(fields) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise PnmError("truncated header", pos)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        fields.append(buf[start:pos])
    if pos >= n:
        raise PnmError("truncated header", pos)
    pos += 1  # single whitespace byte before the raster
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    try:
        width, height, maxval = (int(f) for f in fields[1:4])
    except ValueError:
        raise PnmError("non-integer header field", pos) from None
    if width < 1 or height < 1:
        raise PnmError(f"bad dimensions {width}x{height}", pos)
    if maxval != 255:
        raise PnmError(f"maxval {maxval} not supported; only 8-bit (255)", pos)
    return magic, width, height, maxval, pos


def decode(buf: bytes) -> Image:
    magic, width, height, _, offset = _read_header(buf)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[offset: offset + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload: expected {need} bytes, got {len(payload)}",
                       offset + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 3:
        arr = arr.reshape(height, width, 3) @ np.array(LUMA)
    else:
        arr = arr.reshape(height, width)
    return Image(np.clip(arr, 0.0, 255.0), peak=255.0)


def read(path: str | Path) -> Image:
    return decode(Path(path).read_bytes())


def encode_pgm(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    pix = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode() + pix.tobytes()


def write_pgm(path: str | Path, data) -> None:
    if isinstance(data, Image):
        data = data.data
    Path(path).write_bytes(encode_pgm(data))
