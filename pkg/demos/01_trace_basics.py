"""Generate a synthetic trace, write it to disk, and load it back.

The trace file is newline-delimited JSON (header line first); embeddings
live in per-layer EMB1 binaries next to it.
"""

import tempfile
from pathlib import Path

from toolsense.synth import SynthConfig, synth_trace
from toolsense.traces import load_trace_set, read_embeddings, validate

out_dir = Path(tempfile.mkdtemp(prefix="toolsense_demo_"))

config = SynthConfig(
    n=200,
    # 3x3 cell grid: rows bucket the No-Tool score, columns the Always-Tool
    # score; off-diagonal mass creates positive / negative utility cases
    cell_mix=((0.10, 0.15, 0.05),
              (0.05, 0.30, 0.10),
              (0.00, 0.05, 0.20)),
    embed_dim=16,
    n_layers=3,
    signal_layer=1,
    self_noise=0.25,
    perceived_noise=0.2,
    unparsed_rate=0.05,
)
result = synth_trace(config, seed=42)
trace_path = result.write_to_dir(out_dir)
print(f"wrote {trace_path}")

ts = load_trace_set(trace_path)
print(f"loaded {len(ts)} records; provenance: {ts.provenance}")
print(f"violations: {validate(ts)}")

first = ts.records[0]
print(f"first record: id={first.instance_id} s_nt={first.s_no_tool:.3f} "
      f"s_at={first.s_always_tool:.3f} called={first.self_called}")

emb = read_embeddings(out_dir / "no_tool_input_layer1.emb")
print(f"layer-1 embeddings: {emb.rows}x{emb.cols}, model {emb.model_id!r}")
