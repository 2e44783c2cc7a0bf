"""Readers and writers for ``.ten`` tensors, ``.evt`` event files and binary PGM.

Readers reject malformed input with :class:`FormatError` and never repair it.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .events import EventStream

TEN_MAGIC = b"TEN1"
EVT_HEADER = "t,x,y,p"
FORMAT_VERSIONS = {"ten": "TEN1", "evt": "evt-1", "pgm": "P5/255", "checkpoint": "TCK1"}


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is a byte offset, ``line`` a 1-based line number."""

    def __init__(self, message: str, path=None, offset: int | None = None, line: int | None = None):
        self.path, self.offset, self.line = path, offset, line
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- .ten

def encode_ten(array) -> bytes:
    a = np.asarray(array)
    head = TEN_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_ten(buf: bytes, offset: int = 0, path=None) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, end offset)."""
    if len(buf) < offset + 8:
        raise FormatError("truncated .ten header", path, offset)
    if buf[offset:offset + 4] != TEN_MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}", path, offset)
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated .ten extents", path, pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) < pos + 4 * n:
        raise FormatError(f"truncated .ten payload: need {4 * n} bytes", path, pos)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
    return data, pos + 4 * n


def write_ten(path, array) -> None:
    _atomic_write(path, encode_ten(array))


def read_ten(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    data, end = decode_ten(buf, 0, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", path, end)
    return data


# ---------------------------------------------------------------- .evt

def write_evt(path, events: EventStream) -> None:
    h, w = events.sensor_size
    lines = [f"#meta {h} {w} {events.exposure!r} {events.contrast!r}", EVT_HEADER]
    lines += [f"{t:.9f},{x},{y},{p}" for t, x, y, p in zip(events.t, events.x, events.y, events.p)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_evt(path) -> EventStream:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("not UTF-8", path, exc.start) from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise FormatError("missing #meta line or header", path, line=len(lines) + 1)
    meta = lines[0].split()
    if len(meta) != 5 or meta[0] != "#meta":
        raise FormatError("expected '#meta H W T c'", path, line=1)
    try:
        h, w = int(meta[1]), int(meta[2])
        exposure, contrast = float(meta[3]), float(meta[4])
    except ValueError as exc:
        raise FormatError(f"bad #meta values: {exc}", path, line=1) from exc
    if lines[1].strip() != EVT_HEADER:
        raise FormatError(f"expected header '{EVT_HEADER}'", path, line=2)
    n = len(lines) - 2
    t = np.empty(n)
    xyp = np.empty((n, 3), dtype=np.int64)
    last = -np.inf
    for i, row in enumerate(lines[2:]):
        lineno = i + 3
        parts = row.split(",")
        if len(parts) != 4:
            raise FormatError("expected 4 comma-separated fields", path, line=lineno)
        try:
            t[i] = float(parts[0])
            xyp[i] = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise FormatError(f"unparsable field: {exc}", path, line=lineno) from exc
        if t[i] < last:
            raise FormatError("timestamps decrease", path, line=lineno)
        if not (0 <= xyp[i, 0] < w and 0 <= xyp[i, 1] < h):
            raise FormatError("coordinate outside sensor", path, line=lineno)
        if xyp[i, 2] not in (1, -1):
            raise FormatError("polarity must be +1 or -1", path, line=lineno)
        last = t[i]
    try:
        return EventStream(t, xyp[:, 0], xyp[:, 1], xyp[:, 2], (h, w), exposure, contrast)
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


# ---------------------------------------------------------------- PGM

def to_uint8(image, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    return np.round(np.clip((a - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Write an 8-bit P5 image; float input is taken as [0, 1] and scaled."""
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = to_uint8(a)
    h, w = a.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path, start)
        fields.append((buf[start:pos], start))
    if fields[0][0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0][0]!r})", path, 0)
    try:
        w, h, maxval = (int(f) for f, _ in fields[1:])
    except ValueError as exc:
        raise FormatError("non-integer PGM header field", path, fields[1][1]) from exc
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (only 255)", path, fields[3][1])
    pos += 1
    if len(buf) - pos != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(buf) - pos}", path, pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w).copy()
