"""Train latent need/utility estimators on hidden-state embeddings.

The pipeline: pick the best representation layer by out-of-fold accuracy,
report leakage-free cross-validated metrics, then refit on everything and
serialize the deployable bundle.
"""

import tempfile
from pathlib import Path

from toolsense.estimators import (
    bundle_probabilities,
    cross_val_oof,
    fit_bundle,
    load_bundle,
    save_bundle,
)
from toolsense.mlp import MlpSpec
from toolsense.synth import SynthConfig, synth_trace

result = synth_trace(SynthConfig(
    n=400,
    cell_mix=((0.10, 0.15, 0.05), (0.05, 0.30, 0.10), (0.00, 0.05, 0.20)),
    embed_dim=32,
    n_layers=3,
    signal_layer=2,
    margin=6.0), seed=4)
ts, store = result.trace_set, result.store()

# a linear probe and one small MLP; large nets add nothing on 32-dim toys
grid = [MlpSpec(hidden_layers=(), learning_rate=0.1),
        MlpSpec(hidden_layers=(64,), learning_rate=0.05)]

bundle, search = fit_bundle(ts, store, kind="LNE", grid=grid, layer="auto")
print("layer search (out-of-fold accuracy per layer):")
for entry in search.table:
    arch = "x".join(map(str, entry.spec.hidden_layers)) or "linear"
    print(f"  layer {entry.layer}: {entry.accuracy:.3f} ({arch})")
print(f"selected layer: {bundle.layer}")
print(f"cross-validated: accuracy={bundle.cv_summary['accuracy']:.3f} "
      f"balanced={bundle.cv_summary['balanced_accuracy']:.3f}")

out = Path(tempfile.mkdtemp(prefix="toolsense_demo_")) / "lne.esb"
save_bundle(bundle, out)
loaded = load_bundle(out)
print(f"\nserialized to {out} and reloaded: kind={loaded.kind} "
      f"layer={loaded.layer} dim={loaded.dim}")

probas = bundle_probabilities(loaded, ts, store)
agree = float(((probas >= 0.5).astype(int) == result.need).mean())
print(f"loaded-bundle predictions match true need on {agree:.1%} of records")

noise_oof = cross_val_oof(store.matrix_for(ts, "no_tool_input", 0),
                          result.need, grid[0])
print(f"for contrast, a noise layer scores {noise_oof.accuracy:.3f} out of fold")
