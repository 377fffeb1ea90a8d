"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. Tolerances are pinned in the asserts.
"""

import json
import math
import subprocess
import sys
import threading
import time
import urllib.request
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import AGGREGATE_BLOCKS, GRID_CELL_COUNTS, GRID_N, make_records, \
    random_grid_scores
from toolsense.budget import (
    BudgetLedger,
    BudgetSpec,
    SelectionSet,
    cap_first_k,
    ndcg_at_k,
    oracle_topk,
    per_call_cost,
    realized_gain,
    remaining_calls,
)
from toolsense.estimators import bundle_probabilities, cross_val_oof, fit_bundle, \
    layer_search
from toolsense.labels import gains
from toolsense.mlp import MlpModel, MlpSpec, Standardizer, init_params, loss_and_grad
from toolsense.policy import AlwaysTool, NoTool, Oracle, budget_topk_by_proba, \
    evaluate_policy
from toolsense.service import DecisionService, make_server
from toolsense.synth import SynthConfig, block_fixture, gaussian_embeddings, \
    synth_trace
from toolsense.estimators import EstimatorBundle
from toolsense.traces import EmbeddingMatrix, EmbeddingRef, EmbeddingStore, \
    TraceRecord, TraceSet

PROBE = MlpSpec(hidden_layers=(), learning_rate=0.1)


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {name}: FAIL")
        raise
    print(f"\nACCEPTANCE {name}: PASS")


def test_oracle_policy_correctness():
    with criterion("oracle-policy-correctness"):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        for _ in range(200):
            n = int(rng.integers(1, 13))
            s_nt = random_grid_scores(rng, n)
            s_at = random_grid_scores(rng, n)
            ts = make_records(list(zip(s_nt, s_at)))
            outcome = evaluate_policy(ts, Oracle())
            masks = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(bool)
            sums = np.where(masks, s_at, s_nt).sum(axis=1)
            best = int(np.argmax(sums))
            best_mean = float(np.mean(np.where(masks[best], s_at, s_nt)))
            assert outcome.mean_score == best_mean  # exact
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0, f"took {elapsed:.2f}s"


def test_oracle_allocation():
    with criterion("oracle-allocation"):
        rng = np.random.default_rng(2025)
        start = time.perf_counter()
        for _ in range(200):
            n = int(rng.integers(1, 16))
            s_nt = random_grid_scores(rng, n)
            s_at = random_grid_scores(rng, n)
            ts = make_records(list(zip(s_nt, s_at)))
            deltas = gains(ts)
            masks = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
            sums = masks.astype(np.float64) @ deltas
            sizes = masks.sum(axis=1)
            best_by_size = np.full(n + 1, -np.inf)
            for size in range(n + 1):
                hit = sums[sizes == size]
                if hit.size:
                    best_by_size[size] = hit.max()
            best = np.maximum.accumulate(best_by_size)
            for k in range(n + 1):
                _, gain = oracle_topk(ts, k)
                assert gain == best[k]  # exact
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0, f"took {elapsed:.2f}s"


def test_reference_aggregate_fixture():
    with criterion("reference-aggregate-fixture"):
        ts = block_fixture(AGGREGATE_BLOCKS, seed=7)
        no_tool = evaluate_policy(ts, NoTool())
        always = evaluate_policy(ts, AlwaysTool())
        oracle = evaluate_policy(ts, Oracle())
        assert abs(no_tool.mean_score - 0.61) < 5e-3 and no_tool.total_calls == 0
        assert abs(always.mean_score - 0.78) < 5e-3 and always.total_calls == 500
        assert abs(oracle.mean_score - 0.83) < 5e-3 and oracle.total_calls == 300


def test_bucket_grid_fixture():
    with criterion("bucket-grid-fixture"):
        from toolsense.labels import bucket_transition_matrix
        res = synth_trace(SynthConfig(n=GRID_N, cell_counts=GRID_CELL_COUNTS,
                                      with_embeddings=False), seed=5)
        matrix = bucket_transition_matrix(res.trace_set)
        assert (matrix.counts == res.cell_counts).all()
        assert abs(matrix.need_positive_rate - 177 / 348) < 1e-9


def test_budget_arithmetic():
    with criterion("budget-arithmetic"):
        assert per_call_cost(10000, 400) == 25
        for n_calls in range(0, 402):
            expected = max(0, math.floor((10000 - 25 * n_calls) / 25))
            assert remaining_calls(10000, 25, n_calls) == expected


def test_ndcg():
    with criterion("ndcg"):
        # oracle selection on distinct gains scores exactly 1
        pairs = [(0.0, 0.05 + 0.03 * i) for i in range(20)]
        ts = make_records(pairs)
        for k in (1, 5, 20):
            sel, _ = oracle_topk(ts, k)
            assert abs(ndcg_at_k(ts, sel, k) - 1.0) < 1e-12

        # 1000 random selections stay inside [0, 1]
        rng = np.random.default_rng(99)
        ts_rand = make_records(list(zip(random_grid_scores(rng, 40),
                                        random_grid_scores(rng, 40))))
        ids = [r.instance_id for r in ts_rand.records]
        for _ in range(1000):
            k = int(rng.integers(1, 41))
            chosen = list(rng.permutation(ids)[:int(rng.integers(0, k + 1))])
            value = ndcg_at_k(ts_rand, SelectionSet(ids=chosen, cap=k), k)
            assert 0.0 <= value <= 1.0

        # hand-computed n=6 case
        ts6 = make_records([(0.0, 0.1 * (i + 1)) for i in range(6)])
        sel = SelectionSet(ids=["r000", "r001"], cap=2)
        expected = ((1.0 / np.log2(2) + 2.0 / np.log2(3))
                    / (6.0 / np.log2(2) + 5.0 / np.log2(3)))
        assert abs(ndcg_at_k(ts6, sel, 2) - expected) < 1e-12


def test_estimator_suite():
    with criterion("estimator-suite"):
        start = time.perf_counter()
        rng = np.random.default_rng(42)
        y = (np.arange(500) % 2).astype(np.int64)
        x = gaussian_embeddings(y, 64, 6.0, rng)
        result = cross_val_oof(x, y, PROBE)
        assert result.accuracy >= 0.95
        assert result.balanced_accuracy >= 0.95
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0, f"took {elapsed:.2f}s"

        shuffled = y[np.random.default_rng(7).permutation(500)]
        null_result = cross_val_oof(x, shuffled, PROBE)
        assert 0.4 <= null_result.accuracy <= 0.6

        # analytic gradients vs central differences on a 2-2-1 network
        grad_rng = np.random.default_rng(11)
        gx = grad_rng.standard_normal((100, 2))
        gy = (grad_rng.random(100) < 0.5).astype(np.int64)
        weights, biases = init_params([2, 2, 1], grad_rng)
        _, grad_w, grad_b = loss_and_grad(weights, biases, gx, gy, 1e-4)
        h = 1e-6
        worst = 0.0
        for params, grads in ((weights, grad_w), (biases, grad_b)):
            for i, g in enumerate(grads):
                for idx in np.ndindex(g.shape):
                    orig = params[i][idx]
                    params[i][idx] = orig + h
                    up = loss_and_grad(weights, biases, gx, gy, 1e-4)[0]
                    params[i][idx] = orig - h
                    down = loss_and_grad(weights, biases, gx, gy, 1e-4)[0]
                    params[i][idx] = orig
                    numeric = (up - down) / (2 * h)
                    denom = max(abs(numeric) + abs(g[idx]), 1e-8)
                    worst = max(worst, abs(numeric - g[idx]) / denom)
        assert worst < 1e-4

        # planted signal layer found in 10 of 10 seeded runs
        probe_fast = MlpSpec(hidden_layers=(), learning_rate=0.2)
        for seed in range(10):
            run_rng = np.random.default_rng(seed)
            yy = (run_rng.random(200) < 0.5).astype(np.int64)
            if min(yy.sum(), 200 - yy.sum()) < 5:
                yy[:5] = 1
                yy[5:10] = 0
            layers = {
                0: run_rng.standard_normal((200, 8)),
                1: gaussian_embeddings(yy, 8, 6.0, run_rng),
                2: run_rng.standard_normal((200, 8)),
            }
            search = layer_search(layers, yy, [probe_fast])
            assert search.best_layer == 1, f"seed {seed} picked {search.best_layer}"


def _controller_fixture(seed=13):
    """Self-decisions are 40%-noised positive-utility labels; with_tool_desc
    embeddings separate the true positive-utility classes."""
    rng = np.random.default_rng(seed)
    blocks = [(220, 0.3, 0.8), (60, 0.9, 0.88), (120, 0.6, 0.6)]
    rows = []
    for count, s_nt, s_at in blocks:
        rows.extend([(s_nt, s_at)] * count)
    rows = [rows[i] for i in rng.permutation(len(rows))]
    positive = np.array([1 if s_at > s_nt else 0 for s_nt, s_at in rows])
    flips = rng.random(len(rows)) < 0.4
    called = np.where(flips, 1 - positive, positive).astype(bool)
    records = [
        TraceRecord(
            instance_id=f"inst-{i:05d}", seq_index=i, task_name="ctrl",
            model_id="m", s_no_tool=s_nt, s_always_tool=s_at,
            self_called=bool(called[i]), self_call_count=int(called[i]),
            embedding_refs={"with_tool_desc": EmbeddingRef(
                path="with_tool_desc_layer0.emb", row=i, layer=0)},
        )
        for i, (s_nt, s_at) in enumerate(rows)
    ]
    ts = TraceSet.from_records(records)
    x = gaussian_embeddings(positive, 16, 6.0, rng)
    store = EmbeddingStore.from_matrices({
        ("with_tool_desc", 0): EmbeddingMatrix(values=x.astype(np.float32),
                                               layer=0, model_id="m")})
    return ts, store, called


def test_controller_beats_perception():
    with criterion("controller-beats-perception"):
        ts, store, called = _controller_fixture()
        bundle, _ = fit_bundle(ts, store, "LUE_xd", [MlpSpec(hidden_layers=(),
                                                             learning_rate=0.2)],
                               layer=0)
        probas = bundle_probabilities(bundle, ts, store)
        self_ids = [r.instance_id for r in ts.records if r.self_called]
        n = len(ts)
        for pct in range(10, 101, 10):
            k = round(pct * n / 100)
            est_gain = realized_gain(budget_topk_by_proba(ts, probas, k), ts)
            self_gain = realized_gain(cap_first_k(self_ids, k), ts)
            assert est_gain >= self_gain - 1e-9, (
                f"coverage {pct}%: estimator {est_gain:.3f} < self {self_gain:.3f}")


def test_output_determinism(tmp_path):
    with criterion("output-determinism"):
        cfg = SynthConfig(n=80, cell_mix=((0.15, 0.1, 0.05), (0.05, 0.3, 0.1),
                                          (0.0, 0.1, 0.15)),
                          embed_dim=6, n_layers=2, self_noise=0.2, margin=8.0)
        trace = synth_trace(cfg, seed=3).write_to_dir(tmp_path / "data")
        config = tmp_path / "config.json"
        config.write_text(json.dumps(
            {"grid": [{"hidden_layers": [], "learning_rate": 0.2}]}))

        def run(sub, out, extra=()):
            cmd = [sys.executable, "-m", "toolsense", sub, "--trace", str(trace),
                   "--out", str(out), *extra]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            return out

        for sub, extra in (
            ("simulate", ()),
            ("train", ("--embeddings", str(trace.parent), "--estimator", "lne",
                       "--config", str(config))),
        ):
            a = run(sub, tmp_path / f"{sub}_a", extra)
            b = run(sub, tmp_path / f"{sub}_b", extra)
            names_a = sorted(p.name for p in a.iterdir())
            names_b = sorted(p.name for p in b.iterdir())
            assert names_a == names_b
            for name in names_a:
                assert (a / name).read_bytes() == (b / name).read_bytes(), (
                    f"{sub}: {name} differs between runs")


def test_service_ledger_conservation():
    with criterion("service-ledger-conservation"):
        model = MlpModel(weights=[np.zeros((4, 1))], biases=[np.array([3.0])],
                         spec=MlpSpec(hidden_layers=()))
        bundle = EstimatorBundle(
            kind="LNE", layer=0,
            standardizer=Standardizer(mean=np.zeros(4), scale=np.ones(4)),
            model=model, cv_summary={})
        ledger = BudgetLedger(spec=BudgetSpec(total_budget=1000.0, per_call_cost=25.0))
        service = DecisionService(bundle=bundle, ledger=ledger, tau=0.5)
        server = make_server(service, "127.0.0.1", 0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        host, port = server.server_address[:2]
        url = f"http://{host}:{port}/v1/decide"
        results, errors = [], []

        def worker():
            try:
                data = json.dumps({"embedding": [0, 0, 0, 0]}).encode()
                req = urllib.request.Request(
                    url, data=data, headers={"Content-Type": "application/json"})
                with urllib.request.urlopen(req, timeout=10) as resp:
                    results.append(json.loads(resp.read().decode()))
            except Exception as exc:
                errors.append(exc)

        try:
            threads = [threading.Thread(target=worker) for _ in range(100)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        finally:
            server.shutdown()
            server.server_close()

        assert errors == []
        assert len(results) == 100
        grants = sum(1 for r in results if r["call"])
        assert grants == 40
        assert service.ledger_snapshot()["remaining_calls"] == 0
