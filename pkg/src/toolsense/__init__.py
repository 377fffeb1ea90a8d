"""Trace-driven evaluation and control of LLM tool-calling decisions.

Submodules:
  traces      trace data model, trace-file and EMB1 I/O, validation
  synth       synthetic trace + embedding generator
  labels      buckets, true need/utility, marginal gain, bucket matrix
  alignment   perceived-vs-true confusions, consistency, Venn regions
  budget      budget arithmetic, oracle top-K, capping, gain curves, NDCG
  mlp         from-scratch binary MLP with Adam and early stopping
  estimators  cross-validation, grid/layer search, estimator bundles
  policy      decision policies and their evaluation
  service     HTTP decision service with hard budget accounting
  report      deterministic CSV / Markdown emission
  cli         command-line entry point
"""

from . import alignment, budget, estimators, labels, mlp, policy, report, synth, traces

__all__ = [
    "alignment",
    "budget",
    "estimators",
    "labels",
    "mlp",
    "policy",
    "report",
    "synth",
    "traces",
]

__version__ = "0.1.0"
