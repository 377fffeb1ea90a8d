"""True need, true utility, and the bucket-transition matrix.

Cells above the diagonal are instances the tool helped; below, instances it
hurt. The need region is the Low+Mid No-Tool rows.
"""

import numpy as np

from toolsense.labels import (
    bucket,
    bucket_transition_matrix,
    marginal_gain,
    true_need,
    true_utility,
)
from toolsense.synth import SynthConfig, synth_trace

print("single-instance quantities:")
for s_nt, s_at in ((0.61, 0.78), (0.95, 0.40), (0.50, 0.50)):
    print(f"  s_nt={s_nt:.2f} s_at={s_at:.2f} -> "
          f"bucket={bucket(s_nt)!s:>4} need={true_need(s_nt)} "
          f"utility={true_utility(s_nt, s_at):+d} gain={marginal_gain(s_nt, s_at):+.2f}")

result = synth_trace(SynthConfig(
    n=552,
    cell_counts=((80, 90, 60), (2, 89, 27), (20, 32, 152)),
    with_embeddings=False), seed=5)

matrix = bucket_transition_matrix(result.trace_set)
print("\nbucket-transition counts (rows: No-Tool, cols: Always-Tool):")
print(np.array2string(matrix.counts))
print(f"positive={matrix.positive} negative={matrix.negative} "
      f"neutral={matrix.neutral}")
print(f"need region: {matrix.need_positive}/{matrix.need_total} instances "
      f"gain from calling ({100 * matrix.need_positive_rate:.0f}%)")
