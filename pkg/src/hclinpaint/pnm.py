"""Binary netpbm images: P6 (colour, C x H x W) and P5 (grey/mask, H x W), maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int, path: str | Path | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{msg} (byte offset {offset})")
        self.offset = offset


def _header_fields(buf: bytes, count: int, pos: int, path) -> tuple[list[int], int]:
    fields = []
    n = len(buf)
    while len(fields) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("truncated or malformed header", pos, path)
        fields.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos, path)
    return fields, pos + 1


def decode(buf: bytes, path=None) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", 0, path)
    (width, height, maxval), pos = _header_fields(buf, 3, 2, path)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", pos - 1, path)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf), path)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).astype(np.float64) / 255.0
    if channels == 1:
        return px.reshape(height, width)
    return px.reshape(height, width, 3).transpose(2, 0, 1).copy()


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + q.tobytes()
    if img.ndim == 3 and img.shape[0] == 3:
        _, h, w = img.shape
        return f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()
    raise ValueError(f"expected H x W or 3 x H x W image, got shape {img.shape}")


def read_image(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes(), path)


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))
