"""Binary 8-bit portable graymap (P5, maxval 255) reading and writing."""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def _tokens(data: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte")
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, pos = _tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    payload = data[pos + 1 :]
    if len(payload) < width * height:
        raise FormatError(
            f"truncated PGM payload: expected {width * height} bytes, got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width).astype(float)


def encode_pgm(img) -> bytes:
    arr = np.asarray(img, dtype=float)
    if arr.ndim != 2:
        raise FormatError(f"PGM images are 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("cannot encode non-finite pixels")
    height, width = arr.shape
    body = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + body.tobytes()


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pgm(data)
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}") from None


def save_pgm(img, path: str | os.PathLike) -> None:
    """Write ``img`` as P5; pixels are rounded and clamped to 0..255."""
    data = encode_pgm(img)
    with open(path, "wb") as fh:
        fh.write(data)
