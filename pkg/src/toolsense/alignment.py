"""Descriptive-vs-normative misalignment: confusion matrices between true
and perceived labels, self-consistency, and three-set Venn region counts.

Records whose perceived-need answer is missing or unparseable are excluded
per matrix; exclusion counts are carried alongside the counts.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .labels import DEFAULT_EPS, DEFAULT_NEED_THRESHOLD, true_need, true_utility
from .traces import TraceSet


@dataclass
class ConfusionMatrix2:
    """2x2 counts, rows = true label (0,1), cols = predicted/perceived."""

    counts: np.ndarray
    excluded: int = 0
    row_label: str = "true"
    col_label: str = "perceived"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2):
            raise ValueError(f"expected 2x2 counts, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def included(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.included
        if total == 0:
            return float("nan")
        return float(np.trace(self.counts)) / total

    @property
    def row_rates(self) -> list[float]:
        """Per-row diagonal rate (recall); NaN for empty rows.

        For a consistency matrix these are the follow rates: how often the
        action matched the stated answer within each answer group.
        """
        out = []
        for i in range(2):
            row_total = int(self.counts[i].sum())
            out.append(float(self.counts[i, i]) / row_total if row_total else float("nan"))
        return out

    @property
    def balanced_accuracy(self) -> float:
        """Mean per-row recall; rows with zero total are excluded from the
        mean, so a single-class matrix degenerates to that row's recall."""
        rates = [r for r in self.row_rates if not np.isnan(r)]
        if not rates:
            return float("nan")
        return float(np.mean(rates))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.row_label}\\{self.col_label},0,1\n")
        for i in range(2):
            buf.write(f"{i},{self.counts[i, 0]},{self.counts[i, 1]}\n")
        buf.write(f"excluded,{self.excluded},\n")
        return buf.getvalue()


def _perceived_answer(rec, variant: str) -> bool | None:
    return rec.perceived_need.get(variant)


def need_confusion(ts: TraceSet, variant: str,
                   threshold: float = DEFAULT_NEED_THRESHOLD) -> ConfusionMatrix2:
    """True need vs the parsed perceived-need answer for one prompt variant."""
    counts = np.zeros((2, 2), dtype=np.int64)
    excluded = 0
    for rec in ts.records:
        answer = _perceived_answer(rec, variant)
        if answer is None:
            excluded += 1
            continue
        counts[true_need(rec.s_no_tool, threshold), int(bool(answer))] += 1
    if counts.sum() == 0:
        raise ValueError(f"no records carry a parsed perceived-need answer for {variant!r}")
    return ConfusionMatrix2(counts=counts, excluded=excluded,
                            row_label="true_need", col_label="perceived_need")


def utility_confusion(ts: TraceSet, eps: float = DEFAULT_EPS) -> ConfusionMatrix2:
    """Binarized true utility (+1 vs other) against the self-decision call."""
    if len(ts) == 0:
        raise ValueError("utility_confusion requires a non-empty trace")
    counts = np.zeros((2, 2), dtype=np.int64)
    for rec in ts.records:
        positive = 1 if true_utility(rec.s_no_tool, rec.s_always_tool, eps) == 1 else 0
        counts[positive, int(rec.self_called)] += 1
    return ConfusionMatrix2(counts=counts, excluded=0,
                            row_label="true_utility_positive", col_label="self_called")


def consistency_matrix(ts: TraceSet, variant: str) -> ConfusionMatrix2:
    """Perceived need vs the actual call decision (self-consistency).

    ``row_rates`` reports, per stated answer, how often the action followed it.
    """
    counts = np.zeros((2, 2), dtype=np.int64)
    excluded = 0
    for rec in ts.records:
        answer = _perceived_answer(rec, variant)
        if answer is None:
            excluded += 1
            continue
        counts[int(bool(answer)), int(rec.self_called)] += 1
    if counts.sum() == 0:
        raise ValueError(f"no records carry a parsed perceived-need answer for {variant!r}")
    # Row 0 = no stated need, so following it means *not* calling: the follow
    # rate of row 0 is the diagonal cell either way.
    return ConfusionMatrix2(counts=counts, excluded=excluded,
                            row_label="perceived_need", col_label="self_called")


VENN_REGIONS = ("a", "b", "c", "ab", "ac", "bc", "abc", "outside")


@dataclass
class VennCounts:
    """Exclusive region counts over A = true positive utility,
    B = perceived need, C = perceived utility (tool called)."""

    regions: dict[str, int]
    excluded: int = 0

    @property
    def included(self) -> int:
        return sum(self.regions.values())

    @property
    def c_minus_b(self) -> int:
        """Calls without stated need (containment violation C ⊆ B)."""
        return self.regions["c"] + self.regions["ac"]

    @property
    def b_minus_a(self) -> int:
        """Stated need without positive utility (violation B ⊆ A)."""
        return self.regions["b"] + self.regions["bc"]

    @property
    def c_minus_a(self) -> int:
        """Calls without positive utility (violation C ⊆ A)."""
        return self.regions["c"] + self.regions["bc"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("region,count\n")
        for name in VENN_REGIONS:
            buf.write(f"{name},{self.regions[name]}\n")
        buf.write(f"violations_call_without_need,{self.c_minus_b}\n")
        buf.write(f"violations_need_without_gain,{self.b_minus_a}\n")
        buf.write(f"violations_call_without_gain,{self.c_minus_a}\n")
        return buf.getvalue()


def venn_counts(ts: TraceSet, variant: str, eps: float = DEFAULT_EPS,
                threshold: float = DEFAULT_NEED_THRESHOLD) -> VennCounts:
    """Exact cardinalities of the 8 regions of (A, B, C).

    Restricted to records where all three labels are defined, i.e. the
    perceived-need answer parsed; the count of dropped records is reported.
    The ``threshold`` parameter is accepted for interface symmetry with the
    other alignment views (membership itself does not use true need).
    """
    del threshold  # not part of any of the three sets
    regions = {name: 0 for name in VENN_REGIONS}
    excluded = 0
    total_seen = 0
    for rec in ts.records:
        answer = _perceived_answer(rec, variant)
        if answer is None:
            excluded += 1
            continue
        total_seen += 1
        a = true_utility(rec.s_no_tool, rec.s_always_tool, eps) == 1
        b = bool(answer)
        c = rec.self_called
        if not (a or b or c):
            regions["outside"] += 1
            continue
        key = "".join(ch for ch, flag in zip("abc", (a, b, c)) if flag)
        regions[key] += 1
    if total_seen == 0:
        raise ValueError(f"no records carry all three labels for variant {variant!r}")
    return VennCounts(regions=regions, excluded=excluded)
