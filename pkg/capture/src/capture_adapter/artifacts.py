"""Writers for the two downstream file formats.

These mirror the consumer's external contracts exactly: newline-delimited
trace records behind a version header, and EMB1 embedding binaries
(magic, little-endian uint32 header length, JSON header, row-major
little-endian float32 payload).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TRACE_VERSION = 1
EMB_MAGIC = b"EMB1"


def embedding_file_name(condition: str, layer: int) -> str:
    return f"{condition}_layer{layer}.emb"


def write_emb(values: np.ndarray, layer: int, model_id: str,
              path: str | Path) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {values.shape}")
    if values.size and not np.isfinite(values).all():
        raise ValueError("refusing to write non-finite embeddings")
    header = {
        "dtype": "f32",
        "rows": int(values.shape[0]),
        "cols": int(values.shape[1]),
        "layer": int(layer),
        "model_id": model_id,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())


def read_emb(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read back an EMB1 file (needed to resume a partial capture)."""
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[8 + hlen:], dtype="<f4").reshape(
        header["rows"], header["cols"])
    return values.copy(), header


class TraceWriter:
    """Append-only trace file with crash-safe per-record flushes.

    Existing records are surveyed on open so a rerun can skip instances it
    already captured.
    """

    def __init__(self, path: str | Path, provenance: dict | None = None):
        self.path = Path(path)
        self.existing_ids: set[str] = set()
        self.n_existing = 0
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for i, line in enumerate(fh):
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    if i == 0:
                        if obj.get("trace_version") != TRACE_VERSION:
                            raise ValueError(
                                f"cannot resume {self.path}: version "
                                f"{obj.get('trace_version')!r}")
                        continue
                    self.existing_ids.add(obj["instance_id"])
                    self.n_existing += 1
            self._fh = self.path.open("a", encoding="utf-8", newline="\n")
        else:
            self._fh = self.path.open("w", encoding="utf-8", newline="\n")
            header = {"trace_version": TRACE_VERSION}
            header.update(provenance or {})
            self._fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            self._fh.flush()

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
