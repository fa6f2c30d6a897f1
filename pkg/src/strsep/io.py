"""Matrix CSV files, JSON-lines diagnostics logs and the binary checkpoint container."""
from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class CSVFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyFileError(CSVFormatError):
    pass


class RaggedRowError(CSVFormatError):
    pass


class NonNumericCellError(CSVFormatError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def format_float(x: float) -> str:
    return format(float(x), ".17g")


def write_matrix_csv(matrix, path, header: list[str] | None = None) -> None:
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    cols = header or [f"c{j}" for j in range(arr.shape[1])]
    if len(cols) != arr.shape[1]:
        raise ValueError("header length does not match column count")
    lines = [",".join(cols)]
    lines.extend(",".join(format_float(v) for v in row) for row in arr)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_csv(path, with_header: bool = False):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    lines = [ln.rstrip("\r") for ln in lines]
    if not lines or all(not ln.strip() for ln in lines):
        raise EmptyFileError(f"{path}: empty file", line=1)
    header = lines[0].split(",")
    width = len(header)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise RaggedRowError(f"expected {width} cells, found {len(cells)}", line=lineno)
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise NonNumericCellError(f"non-numeric cell {bad!r}", line=lineno) from None
    if not rows:
        raise EmptyFileError(f"{path}: header but no data rows", line=2)
    arr = np.asarray(rows, dtype=float)
    return (arr, header) if with_header else arr


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------

def dumps_record(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def append_diagnostics(record: dict, path) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_record(record) + "\n")


def write_diagnostics(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def read_diagnostics(path) -> tuple[list[dict], int]:
    """Return (records, number of malformed lines skipped)."""
    records, skipped = [], 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
            except ValueError:
                skipped += 1
                log.warning("%s:%d: skipping malformed diagnostics line", path, lineno)
                continue
            records.append(rec)
    return records, skipped


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little endian):
#   b"STRT" | u16 version | u32 blob count
#   per blob: u16 name length | name utf-8 | u8 kind | u8 ndim | ndim * u32 dims
#             | u64 payload length | payload
#   u32 crc32 of everything above
# kind 0 = float64 array, 1 = JSON document (utf-8)
# ---------------------------------------------------------------------------

MAGIC = b"STRT"
VERSION = 1
_KIND_ARRAY, _KIND_JSON = 0, 1


def write_checkpoint_blobs(path, arrays: list[tuple[str, np.ndarray]], meta: dict) -> None:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays) + 1)]

    def blob(name: str, kind: int, dims: tuple, payload: bytes) -> None:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", kind, len(dims)))
        parts.append(b"".join(struct.pack("<I", d) for d in dims))
        parts.append(struct.pack("<Q", len(payload)) + payload)

    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob("__meta__", _KIND_JSON, (), meta_bytes)
    for name, arr in arrays:
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C-ordered; keeps 0-d shapes
        blob(name, _KIND_ARRAY, a.shape, a.tobytes())
    body = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_checkpoint_blobs(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    (version, count) = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch (corrupt file)")
    pos = 10
    arrays: dict[str, np.ndarray] = {}
    meta: dict | None = None
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            kind, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from("<" + "I" * ndim, body, pos)
            pos += 4 * ndim
            (plen,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            payload = body[pos:pos + plen]
            pos += plen
            if kind == _KIND_JSON:
                meta = json.loads(payload.decode("utf-8"))
            elif kind == _KIND_ARRAY:
                arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(float)
            else:
                raise CheckpointFormatError(f"{path}: unknown blob kind {kind}")
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint") from exc
    if meta is None:
        raise CheckpointFormatError(f"{path}: missing metadata blob")
    return arrays, meta
