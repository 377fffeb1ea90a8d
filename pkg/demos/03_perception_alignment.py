"""How well do a model's stated need and its actual calls track the truth?

Confusion matrices compare true vs perceived labels; the consistency matrix
compares the stated answer against the action; Venn regions show how far
the ideal nesting (calls within stated need within true gains) is violated.
"""

from toolsense.alignment import (
    consistency_matrix,
    need_confusion,
    utility_confusion,
    venn_counts,
)
from toolsense.synth import SynthConfig, synth_trace

result = synth_trace(SynthConfig(
    n=500,
    cell_mix=((0.10, 0.15, 0.05), (0.05, 0.30, 0.10), (0.00, 0.05, 0.20)),
    with_embeddings=False,
    self_noise=0.3,
    perceived_noise=0.25,
    unparsed_rate=0.04), seed=11)
ts = result.trace_set

cm = need_confusion(ts, "v1")
print("true need vs stated need:")
print(cm.counts)
print(f"accuracy={cm.accuracy:.3f} balanced={cm.balanced_accuracy:.3f} "
      f"excluded={cm.excluded}")

cm = utility_confusion(ts)
print("\npositive utility vs tool called:")
print(cm.counts)
print(f"accuracy={cm.accuracy:.3f}")

cm = consistency_matrix(ts, "v1")
print("\nstated need vs action (self-consistency):")
print(cm.counts)
print(f"follow rates by stated answer: no={cm.row_rates[0]:.2f} "
      f"yes={cm.row_rates[1]:.2f}")

venn = venn_counts(ts, "v1")
print("\nVenn regions (a=true positive utility, b=stated need, c=called):")
for region in ("a", "b", "c", "ab", "ac", "bc", "abc", "outside"):
    print(f"  {region:>7}: {venn.regions[region]}")
print(f"calls without stated need: {venn.c_minus_b}")
print(f"stated need without gain:  {venn.b_minus_a}")
print(f"calls without gain:        {venn.c_minus_a}")
