import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from toolsense.budget import BudgetLedger, BudgetSpec
from toolsense.estimators import EstimatorBundle, save_bundle
from toolsense.mlp import MlpModel, MlpSpec, Standardizer
from toolsense.service import DecisionService, ServiceError, load_service, make_server
from toolsense.traces import EmbeddingMatrix, write_embeddings


def probe_bundle(dim=4, bias=2.0, kind="LNE") -> EstimatorBundle:
    """sigmoid(bias) when fed zeros; strongly positive bias grants calls."""
    model = MlpModel(weights=[np.zeros((dim, 1))], biases=[np.array([bias])],
                     spec=MlpSpec(hidden_layers=()))
    st = Standardizer(mean=np.zeros(dim), scale=np.ones(dim))
    return EstimatorBundle(kind=kind, layer=0, standardizer=st, model=model,
                           cv_summary={"accuracy": 1.0})


def service_with(budget=1000.0, cost=25.0, tau=0.5, bias=2.0, dim=4,
                 embeddings=None) -> DecisionService:
    ledger = BudgetLedger(spec=BudgetSpec(total_budget=budget, per_call_cost=cost))
    return DecisionService(bundle=probe_bundle(dim=dim, bias=bias), ledger=ledger,
                           tau=tau, embeddings=embeddings)


class TestDecisionCore:
    def test_grant_consumes_budget(self):
        svc = service_with(budget=50.0, cost=25.0)
        out = svc.decide({"embedding": [0, 0, 0, 0]})
        assert out["call"] is True
        assert out["probability"] == pytest.approx(1 / (1 + np.exp(-2.0)))
        assert out["remaining_calls"] == 1
        out = svc.decide({"embedding": [0, 0, 0, 0]})
        assert out["call"] is True and out["remaining_calls"] == 0

    def test_exhausted_ledger_denies_regardless_of_probability(self):
        svc = service_with(budget=0.0, bias=10.0)
        out = svc.decide({"embedding": [0, 0, 0, 0]})
        assert out["call"] is False
        assert out["probability"] > 0.99

    def test_low_probability_does_not_consume(self):
        svc = service_with(bias=-5.0)
        before = svc.ledger_snapshot()["remaining_calls"]
        out = svc.decide({"embedding": [0, 0, 0, 0]})
        assert out["call"] is False
        assert svc.ledger_snapshot()["remaining_calls"] == before
        assert svc.ledger_snapshot()["n_finished"] == 1

    def test_budget_override_is_a_dry_run(self):
        svc = service_with(budget=50.0, cost=25.0)
        out = svc.decide({"embedding": [0, 0, 0, 0], "budget_override": True})
        assert out["call"] is True
        assert svc.ledger_snapshot()["n_calls"] == 0

    def test_dimension_mismatch(self):
        svc = service_with()
        with pytest.raises(ServiceError) as err:
            svc.decide({"embedding": [0, 0]})
        assert err.value.status == 400

    def test_non_finite_embedding_rejected(self):
        svc = service_with()
        with pytest.raises(ServiceError):
            svc.decide({"embedding": [0, 0, 0, float("nan")]})

    def test_row_reference_lookup(self):
        values = np.zeros((3, 4), dtype=np.float32)
        emb = EmbeddingMatrix(values=values, layer=0, model_id="m")
        svc = service_with(embeddings=emb)
        out = svc.decide({"row": 2})
        assert out["call"] is True
        with pytest.raises(ServiceError):
            svc.decide({"row": 3})

    def test_row_without_embeddings_rejected(self):
        svc = service_with()
        with pytest.raises(ServiceError):
            svc.decide({"row": 0})

    def test_missing_vector_rejected(self):
        svc = service_with()
        with pytest.raises(ServiceError):
            svc.decide({})


class TestLoadService:
    def test_round_trip(self, tmp_path):
        bundle = probe_bundle()
        path = tmp_path / "b.esb"
        save_bundle(bundle, path)
        emb_path = tmp_path / "rows.emb"
        write_embeddings(EmbeddingMatrix(values=np.zeros((2, 4), dtype=np.float32),
                                         layer=0, model_id="m"), emb_path)
        svc = load_service(path, total_budget=100, per_call_cost=10, tau=0.6,
                           embeddings_path=emb_path)
        assert svc.bundle.kind == "LNE"
        assert svc.ledger.remaining_calls == 10
        assert svc.decide({"row": 1})["policy"] == "LNE:tau=0.6"

    def test_corrupt_bundle_rejected(self, tmp_path):
        path = tmp_path / "b.esb"
        path.write_bytes(b"JUNKJUNKJUNK")
        from toolsense.estimators import BundleFormatError
        with pytest.raises(BundleFormatError):
            load_service(path, total_budget=100, per_call_cost=10)


def http_json(url, payload=None):
    if payload is None:
        req = urllib.request.Request(url)
    else:
        data = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(url, data=data,
                                     headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=10) as resp:
        return resp.status, json.loads(resp.read().decode("utf-8"))


@pytest.fixture
def running_server():
    svc = service_with(budget=1000.0, cost=25.0, bias=2.0)
    server = make_server(svc, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield svc, f"http://{host}:{port}"
    server.shutdown()
    server.server_close()


class TestHttp:
    def test_health_and_ledger(self, running_server):
        _, base = running_server
        status, body = http_json(f"{base}/v1/health")
        assert status == 200
        assert body["status"] == "ok" and body["bundle_kind"] == "LNE"
        status, body = http_json(f"{base}/v1/ledger")
        assert status == 200 and body["remaining_calls"] == 40

    def test_decide_round_trip(self, running_server):
        _, base = running_server
        status, body = http_json(f"{base}/v1/decide", {"embedding": [0, 0, 0, 0]})
        assert status == 200
        assert body["call"] is True and body["remaining_calls"] == 39

    def test_unknown_path_404(self, running_server):
        _, base = running_server
        with pytest.raises(urllib.error.HTTPError) as err:
            http_json(f"{base}/v1/nope")
        assert err.value.code == 404

    def test_bad_json_400(self, running_server):
        _, base = running_server
        req = urllib.request.Request(f"{base}/v1/decide", data=b"{oops",
                                     headers={"Content-Type": "application/json"})
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=10)
        assert err.value.code == 400

    def test_dimension_mismatch_400(self, running_server):
        _, base = running_server
        with pytest.raises(urllib.error.HTTPError) as err:
            http_json(f"{base}/v1/decide", {"embedding": [1.0]})
        assert err.value.code == 400

    def test_unloaded_service_returns_503(self):
        server = make_server(None, "127.0.0.1", 0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        host, port = server.server_address[:2]
        try:
            with pytest.raises(urllib.error.HTTPError) as err:
                http_json(f"http://{host}:{port}/v1/health")
            assert err.value.code == 503
        finally:
            server.shutdown()
            server.server_close()

    def test_health_is_idempotent(self, running_server):
        _, base = running_server
        first = http_json(f"{base}/v1/health")[1]
        second = http_json(f"{base}/v1/health")[1]
        assert first == second

    def test_concurrent_requests_conserve_ledger(self, running_server):
        svc, base = running_server
        assert svc.ledger_snapshot()["remaining_calls"] == 40
        results, errors = [], []

        def worker():
            try:
                status, body = http_json(f"{base}/v1/decide",
                                         {"embedding": [0, 0, 0, 0]})
                results.append((status, body["call"]))
            except Exception as exc:  # any failure is a test failure
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        grants = sum(1 for status, call in results if call)
        assert len(results) == 100
        assert grants == 40
        snap = svc.ledger_snapshot()
        assert snap["remaining_calls"] == 0
        assert snap["n_calls"] == 40
