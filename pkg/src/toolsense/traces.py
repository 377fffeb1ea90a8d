"""Trace data model, trace-file I/O, and the EMB1 embedding file format.

A trace file is UTF-8, newline-delimited JSON: line 1 is the header object
``{"trace_version": 1}``, every following line is one record object. Records
are kept sorted by ``seq_index`` after load.

An EMB1 file is: bytes 0-3 ASCII ``EMB1``, bytes 4-7 unsigned 32-bit
little-endian header length H, bytes 8..8+H a UTF-8 JSON header
``{dtype, rows, cols, layer, model_id}``, then rows*cols little-endian
32-bit floats, row-major. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

TRACE_VERSION = 1
EMB_MAGIC = b"EMB1"

PERCEIVED_VARIANTS = ("v1", "v2", "v3")
EMBEDDING_CONDITIONS = ("no_tool_input", "with_tool_desc")


class TraceError(Exception):
    """Base class for trace-layer failures."""


class TraceParseError(TraceError):
    """A trace file line could not be decoded."""

    def __init__(self, path: str | Path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class TraceValidationError(TraceError):
    """Strict load found invariant violations."""

    def __init__(self, violations: list["Violation"]):
        lines = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"{len(violations)} violation(s): {lines}{more}")
        self.violations = violations


class EmbeddingFormatError(TraceError):
    """An EMB1 file is malformed (magic, header, or payload size)."""


@dataclass(frozen=True)
class Violation:
    instance_id: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.instance_id}: {self.message}"


@dataclass(frozen=True)
class EmbeddingRef:
    """Pointer into an EMB1 file: (path, row, layer)."""

    path: str
    row: int
    layer: int


@dataclass(frozen=True)
class TraceRecord:
    """One task instance: scores under both reference policies plus the
    observed self-decision and perception answers."""

    instance_id: str
    seq_index: int
    task_name: str
    model_id: str
    s_no_tool: float
    s_always_tool: float
    self_called: bool
    self_call_count: int
    # variant tag -> parsed answer; None marks an unparseable response
    perceived_need: Mapping[str, bool | None] = field(default_factory=dict)
    # condition tag -> EmbeddingRef
    embedding_refs: Mapping[str, EmbeddingRef] = field(default_factory=dict)
    # opaque captured text (query / tool_response / output); never interpreted
    raw_texts: Mapping[str, str] = field(default_factory=dict)

    def to_json_obj(self) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "instance_id": self.instance_id,
            "seq_index": self.seq_index,
            "task_name": self.task_name,
            "model_id": self.model_id,
            "s_no_tool": self.s_no_tool,
            "s_always_tool": self.s_always_tool,
            "self_called": self.self_called,
            "self_call_count": self.self_call_count,
        }
        if self.perceived_need:
            obj["perceived_need"] = dict(self.perceived_need)
        if self.embedding_refs:
            obj["embedding_refs"] = {
                cond: {"path": r.path, "row": r.row, "layer": r.layer}
                for cond, r in self.embedding_refs.items()
            }
        if self.raw_texts:
            obj["raw_texts"] = dict(self.raw_texts)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict[str, Any]) -> "TraceRecord":
        try:
            refs = {
                cond: EmbeddingRef(path=r["path"], row=int(r["row"]), layer=int(r["layer"]))
                for cond, r in obj.get("embedding_refs", {}).items()
            }
            return cls(
                instance_id=str(obj["instance_id"]),
                seq_index=int(obj["seq_index"]),
                task_name=str(obj["task_name"]),
                model_id=str(obj["model_id"]),
                s_no_tool=float(obj["s_no_tool"]),
                s_always_tool=float(obj["s_always_tool"]),
                self_called=bool(obj["self_called"]),
                self_call_count=int(obj["self_call_count"]),
                perceived_need=dict(obj.get("perceived_need", {})),
                embedding_refs=refs,
                raw_texts=dict(obj.get("raw_texts", {})),
            )
        except KeyError as exc:
            raise ValueError(f"missing field {exc.args[0]!r}") from exc


@dataclass
class TraceSet:
    """Ordered collection of records (ascending seq_index) plus provenance.

    Read-only after load; safe to share across threads.
    """

    records: list[TraceRecord]
    provenance: dict[str, Any] = field(default_factory=dict)
    source_dir: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, instance_id: str) -> TraceRecord:
        for rec in self.records:
            if rec.instance_id == instance_id:
                return rec
        raise KeyError(instance_id)

    @classmethod
    def from_records(cls, records: Iterable[TraceRecord], provenance: dict | None = None,
                     source_dir: Path | None = None) -> "TraceSet":
        ordered = sorted(records, key=lambda r: r.seq_index)
        return cls(records=ordered, provenance=dict(provenance or {}), source_dir=source_dir)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _validate_record(rec: TraceRecord) -> list[Violation]:
    out = []
    rid = rec.instance_id
    if not (0.0 <= rec.s_no_tool <= 1.0):
        out.append(Violation(rid, "score_range", f"s_no_tool={rec.s_no_tool} outside [0,1]"))
    if not (0.0 <= rec.s_always_tool <= 1.0):
        out.append(Violation(rid, "score_range", f"s_always_tool={rec.s_always_tool} outside [0,1]"))
    if rec.seq_index < 0:
        out.append(Violation(rid, "seq_index_negative", f"seq_index={rec.seq_index}"))
    if rec.self_call_count < 0:
        out.append(Violation(rid, "call_count_negative", f"self_call_count={rec.self_call_count}"))
    if rec.self_called != (rec.self_call_count >= 1):
        out.append(Violation(
            rid, "call_count_mismatch",
            f"self_called={rec.self_called} but self_call_count={rec.self_call_count}"))
    for tag in rec.perceived_need:
        if tag not in PERCEIVED_VARIANTS:
            out.append(Violation(rid, "unknown_variant", f"perceived_need tag {tag!r}"))
    for cond, ref in rec.embedding_refs.items():
        if cond not in EMBEDDING_CONDITIONS:
            out.append(Violation(rid, "unknown_condition", f"embedding_refs tag {cond!r}"))
        if ref.row < 0:
            out.append(Violation(rid, "embedding_row_range", f"{cond}: row={ref.row} negative"))
    return out


def validate(ts: TraceSet, check_embeddings: bool = True) -> list[Violation]:
    """Return every invariant violation in the trace set (empty when clean).

    Violations are data, not errors: this never raises on bad records. When
    ``check_embeddings`` is set, referenced EMB1 headers are read (relative
    paths resolve against ``ts.source_dir``) and row indices are range-checked.
    """
    out: list[Violation] = []
    seen_ids: dict[str, int] = {}
    seen_seq: dict[int, str] = {}
    for rec in ts.records:
        out.extend(_validate_record(rec))
        if rec.instance_id in seen_ids:
            out.append(Violation(rec.instance_id, "duplicate_instance_id",
                                 "instance_id appears more than once"))
        seen_ids[rec.instance_id] = rec.seq_index
        if rec.seq_index in seen_seq:
            out.append(Violation(rec.instance_id, "duplicate_seq_index",
                                 f"seq_index={rec.seq_index} also used by {seen_seq[rec.seq_index]!r}"))
        seen_seq[rec.seq_index] = rec.instance_id

    if check_embeddings:
        row_counts: dict[str, int | None] = {}
        for rec in ts.records:
            for cond, ref in rec.embedding_refs.items():
                if ref.path not in row_counts:
                    path = Path(ref.path)
                    if not path.is_absolute() and ts.source_dir is not None:
                        path = ts.source_dir / path
                    try:
                        header = read_embedding_header(path)
                        row_counts[ref.path] = int(header["rows"])
                    except (OSError, EmbeddingFormatError):
                        row_counts[ref.path] = None
                rows = row_counts[ref.path]
                if rows is None:
                    out.append(Violation(rec.instance_id, "embedding_file_missing",
                                         f"{cond}: cannot read {ref.path!r}"))
                elif not (0 <= ref.row < rows):
                    out.append(Violation(rec.instance_id, "embedding_row_range",
                                         f"{cond}: row {ref.row} not in [0,{rows})"))
    return out


# ---------------------------------------------------------------------------
# Trace file I/O
# ---------------------------------------------------------------------------

def parse_trace_file(path: str | Path) -> TraceSet:
    """Parse a trace file without enforcing record invariants.

    Raises TraceParseError for malformed lines and for header problems;
    semantic violations are left for ``validate``.
    """
    path = Path(path)
    records: list[TraceRecord] = []
    header: dict[str, Any] | None = None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if header is None:
                if not isinstance(obj, dict) or "trace_version" not in obj:
                    raise TraceParseError(path, line_no, "first line must be the header object")
                if obj["trace_version"] != TRACE_VERSION:
                    raise TraceParseError(
                        path, line_no, f"unsupported trace_version {obj['trace_version']!r}")
                header = obj
                continue
            try:
                records.append(TraceRecord.from_json_obj(obj))
            except (ValueError, TypeError) as exc:
                raise TraceParseError(path, line_no, str(exc)) from exc
    if header is None:
        raise TraceParseError(path, 1, "empty file: missing header line")
    provenance = {k: v for k, v in header.items() if k != "trace_version"}
    return TraceSet.from_records(records, provenance=provenance, source_dir=path.parent)


def load_trace_set(path: str | Path, check_embeddings: bool = True) -> TraceSet:
    """Load a trace file, sort by seq_index, and enforce every invariant.

    Raises TraceParseError (with line number) on malformed lines and
    TraceValidationError when any record or cross-record invariant fails.
    """
    ts = parse_trace_file(path)
    violations = validate(ts, check_embeddings=check_embeddings)
    if violations:
        raise TraceValidationError(violations)
    return ts


def write_trace_set(ts: TraceSet, path: str | Path) -> None:
    """Write header + one record per line. Deterministic byte output."""
    path = Path(path)
    header: dict[str, Any] = {"trace_version": TRACE_VERSION}
    header.update(ts.provenance)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for rec in ts.records:
            fh.write(json.dumps(rec.to_json_obj(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# EMB1 embedding matrices
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingMatrix:
    """Layer-tagged matrix of last-token hidden states, one row per instance.

    ``values`` is float32 row-major; downstream math promotes to float64.
    """

    values: np.ndarray
    layer: int
    model_id: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"expected 2-d matrix, got shape {self.values.shape}")
        if self.layer < 0:
            raise ValueError(f"layer must be non-negative, got {self.layer}")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


def write_embeddings(m: EmbeddingMatrix, path: str | Path) -> None:
    """Serialize a matrix as EMB1. Refuses non-finite values."""
    if m.values.size and not np.isfinite(m.values).all():
        raise ValueError("embedding matrix contains non-finite values")
    header = {
        "dtype": "f32",
        "rows": m.rows,
        "cols": m.cols,
        "layer": m.layer,
        "model_id": m.model_id,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def _read_header_from(fh) -> dict[str, Any]:
    magic = fh.read(4)
    if magic != EMB_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise EmbeddingFormatError("truncated header length")
    (hlen,) = struct.unpack("<I", raw_len)
    blob = fh.read(hlen)
    if len(blob) != hlen:
        raise EmbeddingFormatError("truncated header payload")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EmbeddingFormatError(f"invalid header JSON: {exc}") from exc
    for key in ("dtype", "rows", "cols", "layer", "model_id"):
        if key not in header:
            raise EmbeddingFormatError(f"header missing {key!r}")
    if header["dtype"] != "f32":
        raise EmbeddingFormatError(f"unsupported dtype {header['dtype']!r}")
    if header["rows"] < 0 or header["cols"] < 0:
        raise EmbeddingFormatError("negative dimensions in header")
    return header


def read_embedding_header(path: str | Path) -> dict[str, Any]:
    """Read only the EMB1 header (cheap row-count checks)."""
    with Path(path).open("rb") as fh:
        return _read_header_from(fh)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Deserialize an EMB1 file; inverse of ``write_embeddings`` bit-for-bit."""
    with Path(path).open("rb") as fh:
        header = _read_header_from(fh)
        rows, cols = int(header["rows"]), int(header["cols"])
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise EmbeddingFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return EmbeddingMatrix(values=values.copy(), layer=int(header["layer"]),
                           model_id=str(header["model_id"]))


def embedding_file_name(condition: str, layer: int) -> str:
    """Naming convention tying a condition tag and layer to one EMB1 file."""
    return f"{condition}_layer{layer}.emb"


class EmbeddingStore:
    """Resolves record embedding refs to float64 vectors.

    Matrices are located by the ``{condition}_layer{L}.emb`` convention in
    ``base_dir`` (or supplied in memory) and cached after first read.
    """

    def __init__(self, base_dir: str | Path | None = None,
                 matrices: dict[tuple[str, int], EmbeddingMatrix] | None = None):
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self._cache: dict[tuple[str, int], EmbeddingMatrix] = dict(matrices or {})

    @classmethod
    def from_matrices(cls, matrices: dict[tuple[str, int], EmbeddingMatrix]) -> "EmbeddingStore":
        return cls(base_dir=None, matrices=matrices)

    def matrix(self, condition: str, layer: int) -> EmbeddingMatrix:
        key = (condition, layer)
        if key not in self._cache:
            if self.base_dir is None:
                raise KeyError(f"no matrix for {key} and no base_dir to load from")
            path = self.base_dir / embedding_file_name(condition, layer)
            if not path.exists():
                raise FileNotFoundError(path)
            self._cache[key] = read_embeddings(path)
        return self._cache[key]

    def layers(self, condition: str) -> list[int]:
        """Layer indices available for a condition, ascending."""
        found = {layer for (cond, layer) in self._cache if cond == condition}
        if self.base_dir is not None:
            for path in self.base_dir.glob(f"{condition}_layer*.emb"):
                stem = path.name[len(condition) + len("_layer"):-len(".emb")]
                if stem.isdigit():
                    found.add(int(stem))
        return sorted(found)

    def vector(self, record: TraceRecord, condition: str, layer: int) -> np.ndarray:
        """Float64 hidden-state vector for one record."""
        ref = record.embedding_refs.get(condition)
        if ref is None:
            raise KeyError(f"record {record.instance_id!r} has no embedding ref "
                           f"for condition {condition!r}")
        mat = self.matrix(condition, layer)
        if not (0 <= ref.row < mat.rows):
            raise IndexError(f"row {ref.row} out of range for {condition} layer {layer}")
        return mat.values[ref.row].astype(np.float64)

    def matrix_for(self, ts: TraceSet, condition: str, layer: int) -> np.ndarray:
        """Stacked float64 matrix aligned with the trace-set record order."""
        mat = self.matrix(condition, layer)
        rows = []
        for rec in ts.records:
            ref = rec.embedding_refs.get(condition)
            if ref is None:
                raise KeyError(f"record {rec.instance_id!r} has no embedding ref "
                               f"for condition {condition!r}")
            if not (0 <= ref.row < mat.rows):
                raise IndexError(f"row {ref.row} out of range for {condition} layer {layer}")
            rows.append(ref.row)
        return mat.values[np.asarray(rows, dtype=int)].astype(np.float64)


def scores_array(ts: TraceSet) -> tuple[np.ndarray, np.ndarray]:
    """(s_no_tool, s_always_tool) float64 arrays in record order."""
    s_nt = np.array([r.s_no_tool for r in ts.records], dtype=np.float64)
    s_at = np.array([r.s_always_tool for r in ts.records], dtype=np.float64)
    return s_nt, s_at


def assert_finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value
