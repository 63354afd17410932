"""On-disk formats: trace CSV and the versioned binary checkpoint."""
from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import ConfigError

TRACE_HEADER = ["step", "phase", "loss_train", "loss_val", "ce", "size_loss", "c_actual_bits",
                "c_expected_bits", "temperature"]
CKPT_MAGIC = b"MQCK1"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class TraceWriter:
    """Buffered CSV trace; rows must arrive in strictly increasing step order."""

    def __init__(self):
        self.rows: list[list[str]] = []
        self._last_step = -1

    def add(self, step: int, phase: str, loss_train, loss_val, ce, size_loss, c_actual, c_expected,
            temperature) -> None:
        if step <= self._last_step:
            raise ValueError(f"trace step {step} not after {self._last_step}")
        self._last_step = step
        self.rows.append([_fmt(v) for v in (step, phase, loss_train, loss_val, ce, size_loss, c_actual,
                                              c_expected, temperature)])

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_HEADER:
            raise ConfigError(f"{path}: unexpected trace header {reader.fieldnames}")
        for row in reader:
            rec: dict[str, Any] = {"step": int(row["step"]), "phase": row["phase"]}
            for key in TRACE_HEADER[2:]:
                rec[key] = float(row[key]) if row[key] != "" else None
            out.append(rec)
    return out


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Layout: magic, u32 meta length, UTF-8 JSON meta, u32 array count, then per array
    (u16 name length, name, u8 ndim, u32 dims, little-endian float64 data)."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    buf = Path(path).read_bytes()
    if buf[:5] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (magic {buf[:5]!r})")
    pos = 5
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ConfigError(f"{path}: trailing bytes after {count} arrays")
    return arrays, meta


def write_json(path: str | Path, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def trace_to_jsonl(rows: Iterable[dict[str, Any]]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)
