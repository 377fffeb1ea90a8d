"""Budget arithmetic, oracle allocation, first-K capping, and NDCG.

With a total budget and a uniform per-call cost, only K calls are
affordable; the oracle spends them on the largest true gains, while an
observed call sequence is capped to its first K calls before scoring.
"""

from toolsense.budget import (
    cap_first_k,
    gain_curve,
    ndcg_at_k,
    observed_selector,
    oracle_selector,
    oracle_topk,
    per_call_cost,
    realized_gain,
    remaining_calls,
    self_decision_ids,
)
from toolsense.synth import SynthConfig, synth_trace

BUDGET = 10_000.0

print("cost of spreading the budget over K calls:")
for k in (500, 400, 250, 100):
    print(f"  K={k:>3} -> ${per_call_cost(BUDGET, k):g} per call")

print("\nremaining calls at $25 per call:")
for n_calls in (0, 10, 399, 400, 401):
    print(f"  after {n_calls:>3} calls: {remaining_calls(BUDGET, 25, n_calls)}")

result = synth_trace(SynthConfig(
    n=500,
    cell_mix=((0.10, 0.15, 0.05), (0.05, 0.30, 0.10), (0.00, 0.05, 0.20)),
    with_embeddings=False,
    self_noise=0.3), seed=21)
ts = result.trace_set

sel, gain = oracle_topk(ts, 100)
print(f"\noracle top-100: {len(sel)} calls, total gain {gain:.2f}")
print(f"oracle NDCG@100: {ndcg_at_k(ts, sel, 100):.3f}")

observed = self_decision_ids(ts)
capped = cap_first_k(observed, 100)
print(f"self-decision first-100: gain {realized_gain(capped, ts):.2f}, "
      f"{capped.over_budget} calls over budget, "
      f"NDCG@100 {ndcg_at_k(ts, capped, 100):.3f}")

levels = [0.0, 20.0, 25.0, 40.0, 100.0]
print("\ngain curves (cost, coverage%, gain, calls, ndcg):")
for name, selector in (("oracle", oracle_selector(ts)),
                       ("self  ", observed_selector(observed))):
    for p in gain_curve(ts, selector, levels, total_budget=BUDGET):
        ndcg = f"{p.ndcg:.3f}" if p.ndcg is not None else "-"
        print(f"  {name} cost={p.cost:>5g} cov={p.coverage_pct:>5.1f}% "
              f"gain={p.gain:>6.2f} calls={p.calls_made:>3} ndcg={ndcg}")
