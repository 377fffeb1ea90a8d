"""HTTP decision service: loads an estimator bundle and answers live
call/no-call requests with hard server-side budget accounting.

Endpoints:
  POST /v1/decide  {"embedding": [...]} or {"row": i}; optional
                   "budget_override": true runs the same gate without
                   consuming budget (a dry-run decision)
  GET  /v1/health  {"status", "bundle_kind", "remaining_calls"}
  GET  /v1/ledger  full ledger snapshot

Model state is immutable and shared by all request threads; ledger
mutations are serialized through one lock, so grants never exceed the
budget under any interleaving.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .budget import BudgetLedger, BudgetSpec
from .estimators import EstimatorBundle, load_bundle
from .traces import EmbeddingMatrix, read_embeddings

DEFAULT_TAU = 0.5


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class DecisionService:
    """Pure decision core; the HTTP layer is a thin shell around it."""

    bundle: EstimatorBundle
    ledger: BudgetLedger
    tau: float = DEFAULT_TAU
    embeddings: EmbeddingMatrix | None = None  # enables row-reference requests

    def __post_init__(self):
        self._lock = threading.Lock()

    @property
    def policy_tag(self) -> str:
        return f"{self.bundle.kind}:tau={self.tau:g}"

    def _resolve_vector(self, req: dict) -> np.ndarray:
        embedding = req.get("embedding")
        row = req.get("row")
        if embedding is not None and row is not None:
            raise ServiceError(400, "give either 'embedding' or 'row', not both")
        if embedding is not None:
            vec = np.asarray(embedding, dtype=np.float64)
            if vec.ndim != 1:
                raise ServiceError(400, f"embedding must be a flat vector, got shape {vec.shape}")
            if vec.shape[0] != self.bundle.dim:
                raise ServiceError(400, f"dimension mismatch: got {vec.shape[0]}, "
                                        f"bundle expects {self.bundle.dim}")
            if not np.isfinite(vec).all():
                raise ServiceError(400, "embedding contains non-finite values")
            return vec
        if row is not None:
            if self.embeddings is None:
                raise ServiceError(400, "row references need the service to be "
                                        "started with an embeddings file")
            if not isinstance(row, int) or not (0 <= row < self.embeddings.rows):
                raise ServiceError(400, f"row {row!r} not in [0, {self.embeddings.rows})")
            return self.embeddings.values[row].astype(np.float64)
        raise ServiceError(400, "request needs 'embedding' or 'row'")

    def decide(self, req: dict) -> dict:
        vec = self._resolve_vector(req)
        probability = self.bundle.predict_proba(vec)  # read-only model state
        consume = not bool(req.get("budget_override", False))
        with self._lock:
            call = probability >= self.tau and self.ledger.remaining_calls > 0
            if consume:
                self.ledger.record(called=call)
            remaining = self.ledger.remaining_calls
        return {
            "call": bool(call),
            "probability": probability,
            "remaining_calls": remaining,
            "policy": self.policy_tag,
        }

    def health(self) -> dict:
        with self._lock:
            remaining = self.ledger.remaining_calls
        return {"status": "ok", "bundle_kind": self.bundle.kind,
                "remaining_calls": remaining}

    def ledger_snapshot(self) -> dict:
        with self._lock:
            return self.ledger.snapshot()


def load_service(bundle_path: str | Path, total_budget: float, per_call_cost: float,
                 tau: float = DEFAULT_TAU, n_questions: int = 0,
                 embeddings_path: str | Path | None = None) -> DecisionService:
    """Build service state from a serialized bundle and a fresh ledger."""
    bundle = load_bundle(bundle_path)
    spec = BudgetSpec(total_budget=total_budget, per_call_cost=per_call_cost,
                      n_questions=n_questions)
    embeddings = read_embeddings(embeddings_path) if embeddings_path else None
    return DecisionService(bundle=bundle, ledger=BudgetLedger(spec=spec), tau=tau,
                           embeddings=embeddings)


class _Handler(BaseHTTPRequestHandler):
    service: DecisionService | None = None  # set by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _service(self) -> DecisionService:
        if self.service is None:
            raise ServiceError(503, "no bundle loaded")
        return self.service

    def do_GET(self):
        try:
            svc = self._service()
            if self.path == "/v1/health":
                self._send(200, svc.health())
            elif self.path == "/v1/ledger":
                self._send(200, svc.ledger_snapshot())
            else:
                self._send(404, {"error": f"unknown path {self.path}"})
        except ServiceError as exc:
            self._send(exc.status, {"error": exc.message})

    def do_POST(self):
        try:
            svc = self._service()
            if self.path != "/v1/decide":
                self._send(404, {"error": f"unknown path {self.path}"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                req = json.loads(self.rfile.read(length).decode("utf-8") or "{}")
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise ServiceError(400, "request body is not valid JSON") from None
            if not isinstance(req, dict):
                raise ServiceError(400, "request body must be a JSON object")
            self._send(200, svc.decide(req))
        except ServiceError as exc:
            self._send(exc.status, {"error": exc.message})


class _Server(ThreadingHTTPServer):
    # deep accept queue so bursts of concurrent clients are not reset
    request_queue_size = 128
    daemon_threads = True


def make_server(service: DecisionService | None, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    """Threaded server; port 0 binds an ephemeral port."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return _Server((host, port), handler)


def serve(service: DecisionService, host: str, port: int) -> None:
    server = make_server(service, host, port)
    host_out, port_out = server.server_address[:2]
    print(f"decision service listening on {host_out}:{port_out}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
