"""On-disk formats: raw tensor files, checkpoints, PGM label maps.

Raw tensor (``.tsr``)::

    TSR <ndim> <d0> ... <dn-1> <f32|f64>\\n<little-endian row-major payload>

Checkpoint: a manifest header followed by concatenated raw tensor records::

    TDCKPT <count>\\n
    <name> <offset> <nbytes>\\n     (count lines; offsets relative to the data section)
    <data section>
"""

from __future__ import annotations

import io
import os
from typing import BinaryIO, Mapping

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"raw tensor files hold f32/f64 only, got {arr.dtype}")


def tsr_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _dtype_tag(arr)
    header = " ".join(["TSR", str(arr.ndim), *map(str, arr.shape), tag]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def read_tsr_stream(fh: BinaryIO) -> np.ndarray:
    line = fh.readline()
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) < 3 or parts[0] != "TSR":
        raise FormatError(f"bad raw tensor header: {line[:60]!r}")
    try:
        ndim = int(parts[1])
        shape = tuple(int(d) for d in parts[2:2 + ndim])
    except ValueError as exc:
        raise FormatError(f"bad raw tensor header: {line[:60]!r}") from exc
    if len(parts) != ndim + 3 or parts[-1] not in _DTYPES:
        raise FormatError(f"bad raw tensor header: {line[:60]!r}")
    dtype = _DTYPES[parts[-1]]
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"truncated payload: expected {count * dtype.itemsize} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tsr(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tsr_bytes(arr))


def read_tsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tsr_stream(fh)


def write_checkpoint(path, named: Mapping[str, np.ndarray]) -> None:
    blobs, lines, offset = [], [], 0
    for name, arr in named.items():
        if not name or any(ch.isspace() for ch in name):
            raise FormatError(f"parameter name {name!r} must be non-empty without whitespace")
        blob = tsr_bytes(arr)
        lines.append(f"{name} {offset} {len(blob)}\n")
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(f"TDCKPT {len(lines)}\n".encode("ascii"))
        fh.write("".join(lines).encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii", errors="replace").split()
        if len(head) != 2 or head[0] != "TDCKPT":
            raise FormatError(f"{path}: not a checkpoint file")
        entries = []
        for _ in range(int(head[1])):
            name, off, nbytes = fh.readline().decode("ascii").split()
            entries.append((name, int(off), int(nbytes)))
        data = fh.read()
    out = {}
    for name, off, nbytes in entries:
        out[name] = read_tsr_stream(io.BytesIO(data[off:off + nbytes]))
    return out


def write_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("PGM label maps must be 2-D with values in [0,255]")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5" or int(tokens[3]) > 255:
        raise FormatError(f"{os.fspath(path)}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{os.fspath(path)}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)
