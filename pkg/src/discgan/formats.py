"""Image, depth and CSV I/O.

RGB images are stored as binary PPM (``P6``, maxval 255) and depth maps as
little-endian grayscale PFM (``Pf``, scale -1.0). In memory an RGB image is a
float array of shape (H, W, 3) in [0, 1]; a depth map is float32 (H, W).
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_SIDE = 1 << 16


class ParseError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"RGB image must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("RGB values must be finite and in [0, 1]")
    return img


def check_depth(depth: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got {depth.shape}")
    if not np.all(np.isfinite(depth)) or depth.min() < 0:
        raise ValueError("depth values must be finite and non-negative")
    if like is not None and like.shape[:2] != depth.shape:
        raise ValueError(f"depth {depth.shape} does not match image {like.shape[:2]}")
    return depth


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up (0.5 -> 128)."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"RGB image must have shape (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


class _Header:
    """Whitespace-separated ASCII token reader that tracks byte offsets."""

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0
        self.last = 0  # start of the most recent token

    def token(self, what: str) -> tuple[str, int]:
        buf, n = self.buf, len(self.buf)
        while self.pos < n:
            c = buf[self.pos:self.pos + 1]
            if c == b"#":
                while self.pos < n and buf[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and not buf[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise ParseError(f"truncated header: missing {what}", start)
        self.last = start
        return buf[start:self.pos].decode("ascii", errors="replace"), start

    def int(self, what: str) -> int:
        tok, at = self.token(what)
        if not tok.isdigit():
            raise ParseError(f"bad {what} {tok!r}", at)
        return int(tok)

    def end(self) -> int:
        # exactly one whitespace byte separates header and payload
        if self.pos >= len(self.buf) or not self.buf[self.pos:self.pos + 1].isspace():
            raise ParseError("truncated header", self.pos)
        return self.pos + 1


def _check_dims(w: int, h: int, at: int) -> None:
    if not (0 < w <= MAX_SIDE and 0 < h <= MAX_SIDE):
        raise ParseError(f"dimensions {w}x{h} outside 1..{MAX_SIDE}", at)


def decode_ppm(buf: bytes) -> np.ndarray:
    hdr = _Header(buf)
    magic, at = hdr.token("magic")
    if magic != "P6":
        raise ParseError(f"bad magic {magic!r}, expected 'P6'", at)
    w = hdr.int("width")
    dim_at = hdr.last
    h = hdr.int("height")
    _check_dims(w, h, dim_at)
    maxval = hdr.int("maxval")
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported, expected 255", hdr.last)
    start = hdr.end()
    need = w * h * 3
    if len(buf) - start < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def encode_pfm(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got {depth.shape}")
    h, w = depth.shape
    payload = np.flipud(depth).astype("<f4").tobytes()
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + payload


def decode_pfm(buf: bytes) -> np.ndarray:
    hdr = _Header(buf)
    magic, at = hdr.token("magic")
    if magic != "Pf":
        raise ParseError(f"bad magic {magic!r}, expected 'Pf'", at)
    w = hdr.int("width")
    dim_at = hdr.last
    h = hdr.int("height")
    _check_dims(w, h, dim_at)
    tok, scale_at = hdr.token("scale")
    try:
        scale = float(tok)
    except ValueError:
        raise ParseError(f"bad scale {tok!r}", scale_at) from None
    if scale == 0 or not math.isfinite(scale):
        raise ParseError(f"bad scale {tok!r}", scale_at)
    start = hdr.end()
    need = w * h * 4
    if len(buf) - start < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def save_rgb(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def load_rgb(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_depth(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(encode_pfm(depth))


def load_depth(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def fmt(value) -> str:
    """CSV cell: floats with 6 significant digits, everything else via str."""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
