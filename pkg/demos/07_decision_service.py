"""Serve a trained estimator bundle over HTTP with hard budget accounting.

The server grants a call only while the ledger has calls remaining; the
ledger never goes negative, no matter how many clients race it.
"""

import json
import tempfile
import threading
import urllib.request
from pathlib import Path

from toolsense.budget import BudgetLedger, BudgetSpec
from toolsense.estimators import fit_bundle, load_bundle, save_bundle
from toolsense.mlp import MlpSpec
from toolsense.service import DecisionService, make_server
from toolsense.synth import SynthConfig, synth_trace

result = synth_trace(SynthConfig(
    n=200,
    cell_mix=((0.10, 0.15, 0.05), (0.05, 0.30, 0.10), (0.00, 0.05, 0.20)),
    embed_dim=12,
    margin=8.0), seed=15)
bundle, _ = fit_bundle(result.trace_set, result.store(), kind="LNE",
                       grid=[MlpSpec(hidden_layers=(), learning_rate=0.2)],
                       layer=0)
bundle_path = Path(tempfile.mkdtemp(prefix="toolsense_demo_")) / "lne.esb"
save_bundle(bundle, bundle_path)

service = DecisionService(
    bundle=load_bundle(bundle_path),
    ledger=BudgetLedger(spec=BudgetSpec(total_budget=100.0, per_call_cost=25.0)),
    tau=0.5,
)
server = make_server(service, "127.0.0.1", 0)
threading.Thread(target=server.serve_forever, daemon=True).start()
host, port = server.server_address[:2]
base = f"http://{host}:{port}"
print(f"serving {bundle_path.name} at {base} with 4 affordable calls\n")


def call(path, payload=None):
    if payload is None:
        req = urllib.request.Request(base + path)
    else:
        req = urllib.request.Request(base + path,
                                     data=json.dumps(payload).encode(),
                                     headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=5) as resp:
        return json.loads(resp.read().decode())


print("health:", call("/v1/health"))

need_vector = result.matrices[("no_tool_input", 0)].values[0].tolist()
for i in range(6):
    out = call("/v1/decide", {"embedding": need_vector})
    print(f"decide #{i + 1}: call={out['call']} p={out['probability']:.3f} "
          f"remaining={out['remaining_calls']}")

print("ledger:", call("/v1/ledger"))
server.shutdown()
server.server_close()
