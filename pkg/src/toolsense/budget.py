"""Budget modeling and allocation quality: per-call cost, remaining-call
arithmetic, oracle top-K selection, first-K capping, realized-gain curves,
and NDCG@K over marginal-gain relevance ranks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .labels import DEFAULT_EPS, gains
from .traces import TraceSet

DEFAULT_TOTAL_BUDGET = 10_000.0


@dataclass(frozen=True)
class BudgetSpec:
    """Total budget, uniform per-call cost, and the number of questions."""

    total_budget: float = DEFAULT_TOTAL_BUDGET
    per_call_cost: float = 0.0
    n_questions: int = 0

    def __post_init__(self):
        if self.total_budget < 0:
            raise ValueError(f"total_budget must be >= 0, got {self.total_budget}")
        if self.per_call_cost < 0:
            raise ValueError(f"per_call_cost must be >= 0, got {self.per_call_cost}")
        if self.n_questions < 0:
            raise ValueError(f"n_questions must be >= 0, got {self.n_questions}")

    @property
    def call_limit(self) -> int:
        """Calls permitted by the whole budget; zero cost frees all questions."""
        if self.per_call_cost == 0:
            return self.n_questions
        return remaining_calls(self.total_budget, self.per_call_cost, 0)


@dataclass
class BudgetLedger:
    """Running account of finished questions, calls made, and calls left."""

    spec: BudgetSpec
    n_finished: int = 0
    n_calls: int = 0

    @property
    def remaining_calls(self) -> int:
        if self.spec.per_call_cost == 0:
            return max(0, self.spec.n_questions - self.n_calls)
        return remaining_calls(self.spec.total_budget, self.spec.per_call_cost, self.n_calls)

    def record(self, called: bool) -> None:
        self.n_finished += 1
        if called:
            self.n_calls += 1

    def snapshot(self) -> dict:
        return {
            "total_budget": self.spec.total_budget,
            "per_call_cost": self.spec.per_call_cost,
            "n_questions": self.spec.n_questions,
            "n_finished": self.n_finished,
            "n_calls": self.n_calls,
            "remaining_calls": self.remaining_calls,
        }


def per_call_cost(budget: float, k_calls: int) -> float:
    """Cost per call implied by spending the whole budget on k calls.

    Exact when the division is exact in integers; 64-bit real otherwise.
    """
    if k_calls < 1:
        raise ValueError(f"k_calls must be >= 1, got {k_calls}")
    if float(budget).is_integer() and float(budget) % k_calls == 0:
        return float(int(budget) // k_calls)
    return budget / k_calls


def remaining_calls(budget: float, cost: float, n_calls: int) -> int:
    """floor((budget - cost * n_calls) / cost), clamped at 0."""
    if cost <= 0:
        raise ValueError(f"cost must be > 0, got {cost}")
    return max(0, math.floor((budget - cost * n_calls) / cost))


@dataclass
class SelectionSet:
    """Ordered instance ids chosen for tool calls, capped at K."""

    ids: list[str]
    cap: int
    over_budget: int = 0  # calls discarded by first-K capping

    def __post_init__(self):
        if self.cap < 0:
            raise ValueError(f"cap must be >= 0, got {self.cap}")
        if len(self.ids) > self.cap:
            raise ValueError(f"selection of {len(self.ids)} exceeds cap {self.cap}")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in set(self.ids)


def oracle_topk(ts: TraceSet, k: int, eps: float = DEFAULT_EPS) -> tuple[SelectionSet, float]:
    """Top-K instances by marginal gain, descending; ties broken by
    ascending seq_index. Instances with gain <= eps are never selected, so
    the selection may be smaller than K."""
    if not (0 <= k <= len(ts)):
        raise ValueError(f"k={k} outside [0, {len(ts)}]")
    deltas = gains(ts)
    order = sorted(range(len(ts)), key=lambda i: (-deltas[i], ts.records[i].seq_index))
    ids: list[str] = []
    total = 0.0
    for i in order:
        if len(ids) >= k or deltas[i] <= eps:
            break
        ids.append(ts.records[i].instance_id)
        total += deltas[i]
    return SelectionSet(ids=ids, cap=k), total


def cap_first_k(observed: Sequence[str], k: int) -> SelectionSet:
    """Budget-cap an observed call sequence to its first K entries; the
    discarded suffix is counted as budget-violating calls."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    kept = list(observed[:k])
    return SelectionSet(ids=kept, cap=k, over_budget=len(observed) - len(kept))


def realized_gain(sel: SelectionSet, ts: TraceSet) -> float:
    """Sum of true marginal gains over the selection; negative selections
    are reported as-is."""
    deltas = {rec.instance_id: rec.s_always_tool - rec.s_no_tool for rec in ts.records}
    total = 0.0
    for instance_id in sel.ids:
        if instance_id not in deltas:
            raise KeyError(f"unknown instance id {instance_id!r}")
        total += deltas[instance_id]
    return total


def _average_ranks_ascending(values: np.ndarray) -> np.ndarray:
    """Ordinal ranks starting at 1, ascending, with ties sharing their
    average rank."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0  # positions are 0-based; ranks 1-based
        ranks[order[i:j + 1]] = avg
        i = j + 1
    return ranks


def ndcg_at_k(ts: TraceSet, sel: SelectionSet, k: int) -> float | None:
    """Ranking quality of a selection against the ideal gain ordering.

    Relevance of an instance is the ascending ordinal rank of its marginal
    gain over all n instances (ties averaged). The evaluated ranking places
    the selection first, in its own order, followed by unselected instances
    in seq order; the ideal ranking sorts relevance descending. K = 0 is
    undefined and reported as None.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return None
    n = len(ts)
    if n == 0:
        raise ValueError("ndcg_at_k requires a non-empty trace")
    relevance = _average_ranks_ascending(gains(ts))
    pos = {rec.instance_id: i for i, rec in enumerate(ts.records)}
    selected = [pos[instance_id] for instance_id in sel.ids]
    chosen = set(selected)
    ranking = selected + [i for i, rec in enumerate(ts.records) if i not in chosen]

    depth = min(k, n)
    discounts = 1.0 / np.log2(np.arange(2, depth + 2, dtype=np.float64))
    dcg = float(np.sum(relevance[ranking[:depth]] * discounts))
    ideal = np.sort(relevance)[::-1]
    idcg = float(np.sum(ideal[:depth] * discounts))
    return dcg / idcg


@dataclass(frozen=True)
class GainCurvePoint:
    cost: float
    coverage_pct: float
    gain: float
    calls_made: int
    ndcg: float | None = None


Selector = Callable[[int], SelectionSet]


def oracle_selector(ts: TraceSet, eps: float = DEFAULT_EPS) -> Selector:
    return lambda k: oracle_topk(ts, k, eps)[0]


def observed_selector(observed: Sequence[str]) -> Selector:
    observed = list(observed)
    return lambda k: cap_first_k(observed, k)


def self_decision_ids(ts: TraceSet) -> list[str]:
    """Instances called under Self-decision, in ascending seq order."""
    return [rec.instance_id for rec in ts.records if rec.self_called]


def gain_curve(ts: TraceSet, selector: Selector, cost_levels: Sequence[float],
               total_budget: float = DEFAULT_TOTAL_BUDGET,
               with_ndcg: bool = True) -> list[GainCurvePoint]:
    """One (coverage, gain) point per cost level.

    Zero cost frees the full trace (K = n); otherwise K = floor(budget/c),
    capped at n.
    """
    n = len(ts)
    points = []
    for cost in cost_levels:
        if cost < 0:
            raise ValueError(f"cost levels must be >= 0, got {cost}")
        k = n if cost == 0 else min(n, math.floor(total_budget / cost))
        sel = selector(k)
        ndcg = ndcg_at_k(ts, sel, k) if with_ndcg else None
        points.append(GainCurvePoint(
            cost=float(cost),
            coverage_pct=100.0 * k / n if n else 0.0,
            gain=realized_gain(sel, ts),
            calls_made=len(sel),
            ndcg=ndcg,
        ))
    return points
