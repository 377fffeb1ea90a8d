"""Synthetic trace + embedding generator used as the test-oracle substrate.

Scores are placed inside engineered bucket-transition cells, so the bucket
matrix of the emitted trace equals the configured cell grid exactly.
Diagonal cells get identical score pairs (marginal gain exactly 0); cells
above the diagonal therefore carry strictly positive gain and cells below
strictly negative gain.

Embeddings are class-separated Gaussians whose class labels match the
generated true-need (no_tool_input condition) or binarized true-utility
(with_tool_desc condition) labels, up to the configured label noise. Only
``signal_layer`` carries class structure; other layers are pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import BucketThresholds, DEFAULT_NEED_THRESHOLD
from .traces import (
    EMBEDDING_CONDITIONS,
    EmbeddingMatrix,
    EmbeddingRef,
    EmbeddingStore,
    TraceRecord,
    TraceSet,
    embedding_file_name,
    write_embeddings,
    write_trace_set,
)

MIX_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs. Either ``cell_counts`` (exact 3x3 integers) or
    ``cell_mix`` (3x3 fractions summing to 1 over ``n``) must be given."""

    n: int = 500
    cell_counts: tuple | None = None
    cell_mix: tuple | None = None
    thresholds: BucketThresholds = field(default_factory=BucketThresholds)
    need_threshold: float = DEFAULT_NEED_THRESHOLD
    embed_dim: int = 64
    margin: float = 6.0
    label_noise: float = 0.0
    n_layers: int = 1
    signal_layer: int = 0
    self_noise: float = 0.0
    multi_call_rate: float = 0.0
    perceived_variants: tuple[str, ...] = ("v1",)
    perceived_noise: float = 0.0
    unparsed_rate: float = 0.0
    task_name: str = "synthetic"
    model_id: str = "synthetic-model"
    with_embeddings: bool = True


@dataclass
class SynthResult:
    trace_set: TraceSet
    matrices: dict[tuple[str, int], EmbeddingMatrix]
    cell_counts: np.ndarray  # the engineered 3x3 grid
    need: np.ndarray         # generated true-need labels, record order
    positive_utility: np.ndarray  # generated 1{U*=+1} labels, record order

    def store(self) -> EmbeddingStore:
        return EmbeddingStore.from_matrices(self.matrices)

    def write_to_dir(self, out_dir: str | Path) -> Path:
        """Write trace + EMB1 files; returns the trace path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (cond, layer), mat in self.matrices.items():
            write_embeddings(mat, out_dir / embedding_file_name(cond, layer))
        trace_path = out_dir / "trace.jsonl"
        write_trace_set(self.trace_set, trace_path)
        return trace_path


def _resolve_cell_counts(config: SynthConfig) -> np.ndarray:
    if config.cell_counts is not None:
        counts = np.asarray(config.cell_counts, dtype=np.int64)
        if counts.shape != (3, 3) or (counts < 0).any():
            raise ValueError("cell_counts must be a non-negative 3x3 grid")
        if counts.sum() != config.n:
            raise ValueError(f"cell_counts sum {counts.sum()} != n {config.n}")
        return counts
    if config.cell_mix is None:
        raise ValueError("config needs cell_counts or cell_mix")
    mix = np.asarray(config.cell_mix, dtype=np.float64)
    if mix.shape != (3, 3) or (mix < 0).any():
        raise ValueError("cell_mix must be a non-negative 3x3 grid")
    if abs(mix.sum() - 1.0) > MIX_TOLERANCE:
        raise ValueError(f"cell_mix sums to {mix.sum()!r}, not 1 within {MIX_TOLERANCE}")
    # Largest-remainder apportionment keeps the total exactly n.
    quotas = mix * config.n
    counts = np.floor(quotas).astype(np.int64)
    remainder = config.n - int(counts.sum())
    if remainder > 0:
        frac = (quotas - counts).ravel()
        order = np.argsort(-frac, kind="stable")
        for k in order[:remainder]:
            counts.ravel()[k] += 1
    return counts


def _bucket_intervals(th: BucketThresholds) -> list[tuple[float, float]]:
    # Interior insets keep samples away from bucket boundaries so the bucket
    # of a sampled score is unambiguous and cross-bucket gains are bounded
    # away from zero.
    spans = [(0.0, th.low_hi), (th.low_hi, th.high_lo), (th.high_lo, 1.0)]
    out = []
    for lo, hi in spans:
        inset = (hi - lo) * 0.05
        out.append((lo + inset, hi - inset))
    return out


def gaussian_embeddings(labels: np.ndarray, dim: int, margin: float,
                        rng: np.random.Generator,
                        label_noise: float = 0.0) -> np.ndarray:
    """Two unit-variance Gaussian clouds with centroids ``margin`` apart
    along the first axis; row class = label, flipped at ``label_noise``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    cls = labels.copy()
    if label_noise > 0.0:
        flips = rng.random(n) < label_noise
        cls = np.where(flips, 1 - cls, cls)
    x = rng.standard_normal((n, dim))
    x[:, 0] += np.where(cls == 1, margin / 2.0, -margin / 2.0)
    return x


def synth_trace(config: SynthConfig, seed: int) -> SynthResult:
    """Deterministic synthetic trace set plus per-layer embedding matrices."""
    counts = _resolve_cell_counts(config)
    rng = np.random.default_rng(seed)
    th = config.thresholds
    intervals = _bucket_intervals(th)

    # Cell assignment per record, shuffled so cells interleave in seq order.
    cells = []
    for i in range(3):
        for j in range(3):
            cells.extend([(i, j)] * int(counts[i, j]))
    cells = [cells[k] for k in rng.permutation(len(cells))]

    s_nt = np.empty(config.n)
    s_at = np.empty(config.n)
    for idx, (i, j) in enumerate(cells):
        lo_i, hi_i = intervals[i]
        s_nt[idx] = rng.uniform(lo_i, hi_i)
        if i == j:
            s_at[idx] = s_nt[idx]
        else:
            lo_j, hi_j = intervals[j]
            s_at[idx] = rng.uniform(lo_j, hi_j)

    need = (s_nt <= config.need_threshold).astype(np.int64)
    positive = np.array([1 if j > i else 0 for (i, j) in cells], dtype=np.int64)

    self_called = positive.astype(bool).copy()
    if config.self_noise > 0.0:
        flips = rng.random(config.n) < config.self_noise
        self_called = np.where(flips, ~self_called, self_called)
    call_counts = self_called.astype(np.int64)
    if config.multi_call_rate > 0.0:
        extra = (rng.random(config.n) < config.multi_call_rate) & self_called
        call_counts = call_counts + extra.astype(np.int64)

    perceived: list[dict[str, bool | None]] = []
    for idx in range(config.n):
        answers: dict[str, bool | None] = {}
        for variant in config.perceived_variants:
            if config.unparsed_rate > 0.0 and rng.random() < config.unparsed_rate:
                answers[variant] = None
                continue
            value = bool(need[idx])
            if config.perceived_noise > 0.0 and rng.random() < config.perceived_noise:
                value = not value
            answers[variant] = value
        perceived.append(answers)

    matrices: dict[tuple[str, int], EmbeddingMatrix] = {}
    if config.with_embeddings:
        class_for = {"no_tool_input": need, "with_tool_desc": positive}
        for cond in EMBEDDING_CONDITIONS:
            for layer in range(config.n_layers):
                if layer == config.signal_layer:
                    x = gaussian_embeddings(class_for[cond], config.embed_dim,
                                            config.margin, rng, config.label_noise)
                else:
                    x = rng.standard_normal((config.n, config.embed_dim))
                matrices[(cond, layer)] = EmbeddingMatrix(
                    values=x.astype(np.float32), layer=layer, model_id=config.model_id)

    records = []
    for idx in range(config.n):
        refs = {}
        if config.with_embeddings and config.n_layers > 0:
            refs = {cond: EmbeddingRef(path=embedding_file_name(cond, 0), row=idx, layer=0)
                    for cond in EMBEDDING_CONDITIONS}
        records.append(TraceRecord(
            instance_id=f"inst-{idx:05d}",
            seq_index=idx,
            task_name=config.task_name,
            model_id=config.model_id,
            s_no_tool=float(s_nt[idx]),
            s_always_tool=float(s_at[idx]),
            self_called=bool(self_called[idx]),
            self_call_count=int(call_counts[idx]),
            perceived_need=perceived[idx],
            embedding_refs=refs,
        ))

    ts = TraceSet.from_records(records, provenance={"generator": "synth", "seed": seed})
    return SynthResult(trace_set=ts, matrices=matrices, cell_counts=counts,
                       need=need, positive_utility=positive)


@dataclass(frozen=True)
class ScoreBlock:
    """A run of identical records: count, the two scores, and how many of
    the block are self-called (taken from the front of the block)."""

    count: int
    s_no_tool: float
    s_always_tool: float
    called: int = 0


def block_fixture(blocks: Sequence[ScoreBlock], seed: int | None = None,
                  task_name: str = "blocks", model_id: str = "block-model") -> TraceSet:
    """Trace set with exact aggregate structure, optionally shuffled.

    Useful for engineering traces whose mean scores, gain counts, and call
    totals are pinned in advance.
    """
    rows: list[tuple[float, float, bool]] = []
    for blk in blocks:
        if not (0 <= blk.called <= blk.count):
            raise ValueError(f"called={blk.called} outside [0, {blk.count}]")
        for i in range(blk.count):
            rows.append((blk.s_no_tool, blk.s_always_tool, i < blk.called))
    if seed is not None:
        rng = np.random.default_rng(seed)
        rows = [rows[k] for k in rng.permutation(len(rows))]
    records = [
        TraceRecord(
            instance_id=f"inst-{idx:05d}",
            seq_index=idx,
            task_name=task_name,
            model_id=model_id,
            s_no_tool=s_nt,
            s_always_tool=s_at,
            self_called=called,
            self_call_count=1 if called else 0,
        )
        for idx, (s_nt, s_at, called) in enumerate(rows)
    ]
    return TraceSet.from_records(records, provenance={"generator": "block_fixture"})
