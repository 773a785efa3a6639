"""File formats: TNSR tensors, binary PGM images and small JSON helpers.

TNSR record layout (little-endian)::

    b"TNSR" | u32 version=1 | u32 rank | rank x u64 extents | f64 payload (row-major)

A checkpoint file is several records written back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class FormatError(ValueError):
    pass


def _as_array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def write_tnsr_record(f, array) -> None:
    a = np.array(_as_array(array), dtype="<f8", order="C")  # keeps rank 0
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes(order="C"))


def read_tnsr_record(f):
    """Read one record; returns ``None`` at a clean end of file."""
    magic = f.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad TNSR magic {magic!r}")
    head = f.read(8)
    if len(head) != 8:
        raise FormatError("truncated TNSR header")
    version, rank = struct.unpack("<II", head)
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    ext = f.read(8 * rank)
    if len(ext) != 8 * rank:
        raise FormatError("truncated TNSR extents")
    shape = struct.unpack(f"<{rank}Q", ext)
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated TNSR payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tnsr(path, array) -> None:
    with open(path, "wb") as f:
        write_tnsr_record(f, array)


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        a = read_tnsr_record(f)
        if a is None:
            raise FormatError(f"{path}: empty file")
        return a


def save_tnsr_records(path, arrays) -> None:
    with open(path, "wb") as f:
        for a in arrays:
            write_tnsr_record(f, a)


def load_tnsr_records(path):
    out = []
    with open(path, "rb") as f:
        while (a := read_tnsr_record(f)) is not None:
            out.append(a)
    return out


# -- PGM ---------------------------------------------------------------------
def write_pgm(path, array, maxval=None) -> None:
    """Write a binary (P5) PGM from non-negative integers."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise FormatError("PGM needs a 2-d array")
    if maxval is None:
        maxval = 255 if a.max(initial=0) < 256 else 65535
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise FormatError(f"PGM values must lie in [0, {maxval}]")
    dtype = "u1" if maxval < 256 else ">u2"
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(a.astype(dtype).tobytes())


def _pgm_tokens(data):
    pos, tokens = 2, []
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_pgm(path):
    """Return ``(array, maxval)`` for a P5 PGM file."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _pgm_tokens(data)
    dtype = "u1" if maxval < 256 else ">u2"
    n = w * h * (1 if maxval < 256 else 2)
    if len(data) - pos < n:
        raise FormatError(f"{path}: truncated PGM payload")
    a = np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(h, w)
    return a.astype(np.int64), maxval


def read_image(path) -> np.ndarray:
    """Grayscale image as float64 in [0, 1] (PGM) or as stored (TNSR)."""
    path = Path(path)
    if path.suffix == ".tnsr":
        a = load_tnsr(path)
        if a.ndim == 3 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 2:
            raise FormatError(f"{path}: expected a 2-d image, got shape {a.shape}")
        return a
    a, maxval = read_pgm(path)
    return a / float(maxval)


def heatmap_pgm(path, values):
    """Min-max scale ``values`` to 8 bits; returns the scale for the sidecar."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    write_pgm(path, np.rint(scaled * 255).astype(np.int64), maxval=255)
    return {"min": lo, "max": hi}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
