"""Score decision policies against each other on one trace.

The oracle calls exactly when the true gain is positive; estimator policies
decide from hidden states, either by probability threshold or by spending a
budget on the top-K most promising instances.
"""

from toolsense.estimators import fit_bundle
from toolsense.mlp import MlpSpec
from toolsense.policy import (
    AlwaysTool,
    EstimatorBudget,
    EstimatorThreshold,
    NoTool,
    Oracle,
    PolicyContext,
    SelfDecision,
    evaluate_policy,
    policy_label,
)
from toolsense.synth import SynthConfig, synth_trace

result = synth_trace(SynthConfig(
    n=400,
    cell_mix=((0.10, 0.15, 0.05), (0.05, 0.30, 0.10), (0.00, 0.05, 0.20)),
    embed_dim=24,
    margin=6.0,
    self_noise=0.35), seed=8)
ts, store = result.trace_set, result.store()

bundle, _ = fit_bundle(ts, store, kind="LUE_xd",
                       grid=[MlpSpec(hidden_layers=(), learning_rate=0.1)],
                       layer=0)

context = PolicyContext(store=store)
policies = [
    NoTool(),
    AlwaysTool(),
    SelfDecision(),
    Oracle(),
    EstimatorThreshold(bundle=bundle, tau=0.5),
    EstimatorBudget(bundle=bundle, k=150),
]

print(f"{'policy':<16} {'score':>6} {'calls':>6}")
for kind in policies:
    outcome = evaluate_policy(ts, kind, context)
    print(f"{policy_label(kind):<16} {outcome.mean_score:>6.3f} "
          f"{outcome.total_calls:>6}")
