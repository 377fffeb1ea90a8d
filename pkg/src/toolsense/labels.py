"""Normative quantities: score buckets, true need, true utility, marginal
gain, and the 3x3 bucket-transition matrix.

All functions are pure over immutable inputs and safe to map in parallel.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass

import numpy as np

from .traces import TraceSet

DEFAULT_NEED_THRESHOLD = 0.9
DEFAULT_EPS = 1e-9


class Bucket(enum.IntEnum):
    LOW = 0
    MID = 1
    HIGH = 2

    def __str__(self) -> str:  # CSV/report labels
        return self.name.capitalize()


BUCKET_NAMES = ("Low", "Mid", "High")


@dataclass(frozen=True)
class BucketThresholds:
    """Half-open score buckets: Low=[0, low_hi], Mid=(low_hi, high_lo],
    High=(high_lo, 1]."""

    low_hi: float = 0.1
    high_lo: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.low_hi < self.high_lo <= 1.0):
            raise ValueError(
                f"require 0 <= low_hi < high_lo <= 1, got ({self.low_hi}, {self.high_lo})")


def bucket(score: float, th: BucketThresholds = BucketThresholds()) -> Bucket:
    """Bucket a score; boundaries belong to the lower bucket."""
    if not (0.0 <= score <= 1.0):
        raise ValueError(f"score {score!r} outside [0,1]")
    if score <= th.low_hi:
        return Bucket.LOW
    if score <= th.high_lo:
        return Bucket.MID
    return Bucket.HIGH


def true_need(s_nt: float, threshold: float = DEFAULT_NEED_THRESHOLD) -> int:
    """1 when the No-Tool score is at or below the quality threshold."""
    if not (0.0 <= s_nt <= 1.0):
        raise ValueError(f"s_nt {s_nt!r} outside [0,1]")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold {threshold!r} outside [0,1]")
    return 1 if s_nt <= threshold else 0


def true_utility(s_nt: float, s_at: float, eps: float = DEFAULT_EPS) -> int:
    """Ternary label: +1 improve, 0 neutral (within eps), -1 degrade."""
    if not (0.0 <= s_nt <= 1.0) or not (0.0 <= s_at <= 1.0):
        raise ValueError(f"scores ({s_nt!r}, {s_at!r}) outside [0,1]")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps!r}")
    if s_at - s_nt > eps:
        return 1
    if s_nt - s_at > eps:
        return -1
    return 0


def marginal_gain(s_nt: float, s_at: float) -> float:
    """Per-instance benefit of calling: s_always_tool - s_no_tool."""
    if not (0.0 <= s_nt <= 1.0) or not (0.0 <= s_at <= 1.0):
        raise ValueError(f"scores ({s_nt!r}, {s_at!r}) outside [0,1]")
    return s_at - s_nt


def need_labels(ts: TraceSet, threshold: float = DEFAULT_NEED_THRESHOLD) -> np.ndarray:
    return np.array([true_need(r.s_no_tool, threshold) for r in ts.records], dtype=np.int64)


def utility_labels(ts: TraceSet, eps: float = DEFAULT_EPS) -> np.ndarray:
    return np.array([true_utility(r.s_no_tool, r.s_always_tool, eps) for r in ts.records],
                    dtype=np.int64)


def positive_utility_labels(ts: TraceSet, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Binarized utility: 1 where the ternary label is +1, else 0."""
    return (utility_labels(ts, eps) == 1).astype(np.int64)


def gains(ts: TraceSet) -> np.ndarray:
    return np.array([marginal_gain(r.s_no_tool, r.s_always_tool) for r in ts.records],
                    dtype=np.float64)


@dataclass
class BucketMatrix:
    """3x3 counts indexed (No-Tool bucket, Always-Tool bucket).

    Cells above the diagonal are positive utility, below negative, on the
    diagonal neutral. The need region is the Low+Mid No-Tool rows.
    """

    counts: np.ndarray  # (3,3) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (3, 3):
            raise ValueError(f"expected 3x3 counts, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def positive(self) -> int:
        return int(np.triu(self.counts, k=1).sum())

    @property
    def negative(self) -> int:
        return int(np.tril(self.counts, k=-1).sum())

    @property
    def neutral(self) -> int:
        return int(np.trace(self.counts))

    @property
    def need_total(self) -> int:
        return int(self.counts[:2].sum())

    @property
    def need_positive(self) -> int:
        return int(np.triu(self.counts[:2], k=1).sum())

    @property
    def need_positive_rate(self) -> float:
        if self.need_total == 0:
            return float("nan")
        return self.need_positive / self.need_total

    def to_csv(self) -> str:
        """3x3 CSV with Low/Mid/High headers plus a region-summary row."""
        buf = io.StringIO()
        buf.write("no_tool\\always_tool," + ",".join(BUCKET_NAMES) + "\n")
        for i, name in enumerate(BUCKET_NAMES):
            buf.write(name + "," + ",".join(str(int(c)) for c in self.counts[i]) + "\n")
        buf.write(
            f"regions,positive={self.positive},negative={self.negative},"
            f"neutral={self.neutral}\n")
        return buf.getvalue()


def bucket_transition_matrix(ts: TraceSet,
                             th: BucketThresholds = BucketThresholds()) -> BucketMatrix:
    """Count records per (No-Tool bucket, Always-Tool bucket) cell.

    Order-invariant: permuting records leaves the matrix unchanged.
    """
    if len(ts) == 0:
        raise ValueError("bucket_transition_matrix requires a non-empty trace")
    counts = np.zeros((3, 3), dtype=np.int64)
    for rec in ts.records:
        i = bucket(rec.s_no_tool, th)
        j = bucket(rec.s_always_tool, th)
        counts[i, j] += 1
    return BucketMatrix(counts=counts)
