"""Plain and binary PGM/PPM codecs (P2, P3, P5, P6).

Images are exchanged as float arrays of shape H x W x C in [0, 1] with C = 1
for graymaps and C = 3 for pixmaps.
"""

from __future__ import annotations

import os

import numpy as np

_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise ImageFormatError(f"{name}: unsupported image format (magic bytes {buf[:4]!r})")
    channels = _CHANNELS[magic]
    try:
        (w, h, maxval), pos = _tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{name}: malformed header ({exc})") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{name}: bad dimensions or maxval ({w}x{h}, maxval {maxval})")
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = buf[pos : pos + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise ImageFormatError(f"{name}: truncated pixel data")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        try:
            tokens, _ = _tokens(buf, count, pos)
        except ImageFormatError:
            raise ImageFormatError(f"{name}: truncated pixel data") from None
        values = np.array([int(t) for t in tokens], dtype=np.float64)
    if values.max(initial=0) > maxval:
        raise ImageFormatError(f"{name}: sample exceeds maxval {maxval}")
    return (values / maxval).reshape(h, w, channels)


def read_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read image {os.fspath(path)}: {exc.strerror}") from exc
    return decode(buf, os.fspath(path))


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-to-even, clipping out-of-range values."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(image: np.ndarray, plain: bool = False) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    q = img if img.dtype == np.uint8 else quantize(img)
    if plain:
        magic = b"P2" if c == 1 else b"P3"
        rows = [" ".join(str(v) for v in row.reshape(-1)) for row in q]
        return magic + f"\n{w} {h}\n255\n".encode() + ("\n".join(rows) + "\n").encode()
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def write_image(path: str | os.PathLike, image: np.ndarray, plain: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(image, plain=plain))
