"""Binary PPM (P6) and PGM (P5) reading and writing."""
from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    pass


class BadMagic(NetpbmError):
    pass


class TruncatedFile(NetpbmError):
    pass


class MaxvalUnsupported(NetpbmError):
    pass


def _header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise BadMagic(f"expected {magic!r}, got {buf[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise TruncatedFile("incomplete header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedFile("missing whitespace after header")
    return fields, pos + 1


def _read(path, magic: bytes, channels: int):
    with open(path, "rb") as fh:
        buf = fh.read()
    (width, height, maxval), offset = _header(buf, magic)
    if maxval == 255:
        dtype = np.uint8
    elif maxval == 65535 and channels == 1:
        dtype = np.dtype(">u2")
    else:
        raise MaxvalUnsupported(f"maxval {maxval}")
    count = width * height * channels
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - offset < nbytes:
        raise TruncatedFile(f"expected {nbytes} bytes of pixel data")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape)


def read_ppm(path) -> np.ndarray:
    """H x W x 3 uint8 array."""
    return _read(path, b"P6", 3).copy()


def write_ppm(path, image) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("PPM images must be uint8")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    """H x W int64 label map."""
    return _read(path, b"P5", 1).astype(np.int64)


def write_pgm(path, labels) -> None:
    """8-bit when every value fits, 16-bit big-endian otherwise."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise MaxvalUnsupported("label values must lie in 0..65535")
    h, w = labels.shape
    if labels.max(initial=0) <= 255:
        maxval, data = 255, labels.astype(np.uint8)
    else:
        maxval, data = 65535, labels.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(np.ascontiguousarray(data).tobytes())


def to_unit(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
