"""Decision policies over traces and their evaluation into score/call tables.

Decisions are pure functions of (record, context); budget-coupled policies
precompute their selection once and decide by lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .budget import SelectionSet
from .estimators import EstimatorBundle, bundle_probabilities
from .labels import DEFAULT_EPS
from .traces import EmbeddingStore, TraceRecord, TraceSet


@dataclass(frozen=True)
class NoTool:
    """Never call."""


@dataclass(frozen=True)
class AlwaysTool:
    """Always call."""


@dataclass(frozen=True)
class SelfDecision:
    """Replay the model's own recorded decision."""


@dataclass(frozen=True)
class Oracle:
    """Call exactly when the true marginal gain is positive."""


@dataclass(frozen=True)
class EstimatorThreshold:
    """Call when the estimator probability reaches tau."""

    bundle: EstimatorBundle
    tau: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must be in (0,1), got {self.tau}")


@dataclass(frozen=True)
class EstimatorBudget:
    """Call the top-K instances by estimator probability."""

    bundle: EstimatorBundle
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")


PolicyKind = Union[NoTool, AlwaysTool, SelfDecision, Oracle,
                   EstimatorThreshold, EstimatorBudget]


@dataclass
class PolicyContext:
    """Shared decision state: comparison tolerance, embedding access, and the
    precomputed selection for budget policies."""

    eps: float = DEFAULT_EPS
    store: EmbeddingStore | None = None
    budget_selection: frozenset[str] | None = None


def _estimator_proba(bundle: EstimatorBundle, record: TraceRecord,
                     context: PolicyContext) -> float:
    if context.store is None:
        raise ValueError("estimator policies need an embedding store in the context")
    vec = context.store.vector(record, bundle.condition, bundle.layer)
    return bundle.predict_proba(vec)


def decide(kind: PolicyKind, record: TraceRecord, context: PolicyContext) -> bool:
    """Single call/no-call decision for one record."""
    if isinstance(kind, NoTool):
        return False
    if isinstance(kind, AlwaysTool):
        return True
    if isinstance(kind, SelfDecision):
        return record.self_called
    if isinstance(kind, Oracle):
        return (record.s_always_tool - record.s_no_tool) > context.eps
    if isinstance(kind, EstimatorThreshold):
        return _estimator_proba(kind.bundle, record, context) >= kind.tau
    if isinstance(kind, EstimatorBudget):
        if context.budget_selection is None:
            raise ValueError("EstimatorBudget decisions need a precomputed selection; "
                             "use evaluate_policy or prepare_context")
        return record.instance_id in context.budget_selection
    raise TypeError(f"unknown policy kind {kind!r}")


def budget_topk_by_proba(ts: TraceSet, probas: np.ndarray, k: int) -> SelectionSet:
    """First K instances by probability descending, ties by ascending
    seq_index."""
    probas = np.asarray(probas, dtype=np.float64)
    if probas.shape[0] != len(ts):
        raise ValueError(f"got {probas.shape[0]} probabilities for {len(ts)} records")
    if not (0 <= k <= len(ts)):
        raise ValueError(f"k={k} outside [0, {len(ts)}]")
    order = sorted(range(len(ts)),
                   key=lambda i: (-probas[i], ts.records[i].seq_index))
    return SelectionSet(ids=[ts.records[i].instance_id for i in order[:k]], cap=k)


def prepare_context(kind: PolicyKind, ts: TraceSet,
                    context: PolicyContext) -> PolicyContext:
    """Resolve any whole-trace precomputation the policy needs."""
    if isinstance(kind, EstimatorBudget):
        if kind.k > len(ts):
            raise ValueError(f"budget k={kind.k} exceeds trace size {len(ts)}")
        if context.store is None:
            raise ValueError("EstimatorBudget needs an embedding store in the context")
        probas = bundle_probabilities(kind.bundle, ts, context.store)
        sel = budget_topk_by_proba(ts, probas, kind.k)
        return replace(context, budget_selection=frozenset(sel.ids))
    return context


@dataclass
class PolicyOutcome:
    """Mean score, call total, and the per-instance decision vector."""

    mean_score: float
    total_calls: int
    decisions: np.ndarray = field(repr=False)


def evaluate_policy(ts: TraceSet, kind: PolicyKind,
                    context: PolicyContext | None = None) -> PolicyOutcome:
    """Score a policy over a trace.

    The per-instance score is s_always_tool when called, s_no_tool
    otherwise. Self-decision call totals keep per-instance multiplicity
    (they may exceed the trace size); every other policy counts decided
    instances.
    """
    if len(ts) == 0:
        raise ValueError("evaluate_policy requires a non-empty trace")
    context = prepare_context(kind, ts, context or PolicyContext())
    decisions = np.array([decide(kind, rec, context) for rec in ts.records], dtype=bool)
    scores = np.array([rec.s_always_tool if called else rec.s_no_tool
                       for rec, called in zip(ts.records, decisions)], dtype=np.float64)
    if isinstance(kind, SelfDecision):
        total_calls = int(sum(rec.self_call_count for rec in ts.records))
    else:
        total_calls = int(decisions.sum())
    return PolicyOutcome(mean_score=float(np.mean(scores)), total_calls=total_calls,
                         decisions=decisions)


def policy_label(kind: PolicyKind) -> str:
    """Stable display name for tables."""
    if isinstance(kind, NoTool):
        return "no_tool"
    if isinstance(kind, AlwaysTool):
        return "always_tool"
    if isinstance(kind, SelfDecision):
        return "self_decision"
    if isinstance(kind, Oracle):
        return "optimal"
    if isinstance(kind, EstimatorThreshold):
        return f"{kind.bundle.kind}_tau{kind.tau:g}"
    if isinstance(kind, EstimatorBudget):
        return f"{kind.bundle.kind}_top{kind.k}"
    raise TypeError(f"unknown policy kind {kind!r}")
