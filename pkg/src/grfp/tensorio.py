"""GRFPTNSR binary tensor container and checkpoint directories.

Layout: 8 magic bytes ``GRFPTNSR``, u8 version, u8 dtype code
(0 = f32, 1 = f64, 2 = u8), u8 rank, ``rank`` u32 little-endian extents,
then the raw little-endian values in row-major order (channels innermost).
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GRFPTNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class FormatError(ValueError):
    """A container file is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {a.dtype}; use float32, float64 or uint8")
    if a.ndim > 255:
        raise ValueError("rank too large")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[a.dtype], a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[_CODES[a.dtype]]).tobytes()


def decode(buf: bytes, expect_rank: int | None = None) -> np.ndarray:
    if len(buf) < len(MAGIC):
        raise FormatError("truncated header", len(buf))
    if buf[:8] != MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}", 0)
    if len(buf) < 11:
        raise FormatError("truncated header", len(buf))
    version, code, rank = struct.unpack_from("<BBB", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 9)
    if expect_rank is not None and rank != expect_rank:
        raise FormatError(f"expected rank {expect_rank}, found rank {rank}", 10)
    off = 11
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated extents", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise FormatError(f"truncated data: need {nbytes} bytes, have {len(buf) - off}", len(buf))
    if len(buf) - off > nbytes:
        raise FormatError("trailing bytes after data", off + nbytes)
    out = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return out.reshape(shape).astype(dtype.newbyteorder("="))


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(array: np.ndarray, path) -> None:
    atomic_write(path, encode(array))


def load_tensor(path, expect_rank: int | None = None) -> np.ndarray:
    return decode(Path(path).read_bytes(), expect_rank)


def save_checkpoint(tensors: dict[str, np.ndarray], directory, meta: dict[str, str] | None = None) -> None:
    """Write one container per tensor plus ``manifest.txt`` (``name = file``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        fname = f"{name}.GRFPTNSR"
        save_tensor(np.asarray(arr), d / fname)
        lines.append(f"{name} = {fname}")
    for k, v in (meta or {}).items():
        lines.append(f"@{k} = {v}")
    atomic_write(d / "manifest.txt", ("\n".join(lines) + "\n").encode())


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in checkpoint directory {d}")
    tensors, meta = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith("@"):
            meta[key[1:]] = value
        else:
            tensors[key] = load_tensor(d / value)
    return tensors, meta


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from an HxWx3 array in [0, 1]."""
    img = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 image; values are written as-is (class ids as gray levels)."""
    img = np.asarray(gray).astype(np.uint8)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode())
    pos += 1
    kind, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    ch = 3 if kind == "P6" else 1
    img = np.frombuffer(data, np.uint8, count=w * h * ch, offset=pos)
    return img.reshape(h, w, ch) if ch == 3 else img.reshape(h, w)
