"""Pluggable model, search, and score backends.

The stub backends keep tests hermetic; the transformers backend loads a
real model lazily and is never imported unless used.
"""

from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np


class ModelBackend(Protocol):
    """Text generation plus per-layer last-token hidden states."""

    model_id: str
    n_layers: int  # transformer blocks; hidden states span n_layers + 1 rows

    def generate(self, prompt: str) -> str: ...

    def hidden_states(self, prompt: str) -> np.ndarray:
        """(n_layers + 1, hidden_dim): embedding layer 0 plus each block."""
        ...


class SearchClient(Protocol):
    def search(self, query: str, count: int = 5) -> list[dict]: ...


@dataclass
class MockSearchClient:
    """Canned results; records the queries it saw."""

    results: dict[str, list[dict]] = field(default_factory=dict)
    queries: list[str] = field(default_factory=list)

    def search(self, query: str, count: int = 5) -> list[dict]:
        self.queries.append(query)
        canned = self.results.get(query)
        if canned is None:
            canned = [{
                "title": f"Result for {query}",
                "snippet": f"Mock snippet about {query}.",
                "url": "https://example.com/mock",
            }]
        return canned[:count]


@dataclass
class StubModel:
    """Deterministic model stand-in.

    ``decisions`` maps a query to the raw stage-1 response text;
    ``need_answers`` maps (query, variant) to the stated-need response.
    ``states`` maps a prompt to an explicit hidden-state matrix; prompts
    without an entry get a deterministic hash-derived matrix.
    """

    model_id: str = "stub-model"
    n_layers: int = 1
    hidden_dim: int = 8
    decisions: dict[str, str] = field(default_factory=dict)
    need_answers: dict[tuple[str, str], str] = field(default_factory=dict)
    answers: dict[str, str] = field(default_factory=dict)
    states: dict[str, np.ndarray] = field(default_factory=dict)

    def generate(self, prompt: str) -> str:
        for query, response in self.decisions.items():
            if f'"{query}"' in prompt and "Respond with a JSON object" in prompt:
                return response
        for (query, variant), response in self.need_answers.items():
            marker = {"v1": "exact schema", "v2": "need help", "v3": "know the answer"}
            if f'"{query}"' in prompt and marker[variant] in prompt:
                return response
        for query, answer in self.answers.items():
            if query in prompt:
                return answer
        return f"stub answer: {prompt[:40]}"

    def hidden_states(self, prompt: str) -> np.ndarray:
        if prompt in self.states:
            return np.asarray(self.states[prompt], dtype=np.float32)
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal((self.n_layers + 1, self.hidden_dim)).astype(
            np.float32)


class TransformersBackend:
    """Real hidden-state extraction via HuggingFace transformers.

    Imported lazily; prompts are truncated to the model's context window
    (the truncation policy is recorded in trace provenance by the runner).
    """

    def __init__(self, model_id: str, device: str = "cpu", max_length: int = 4096):
        import torch  # deferred heavyweight imports
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.model_id = model_id
        self.max_length = max_length
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id, output_hidden_states=True)
        self.model.eval().to(device)
        self.device = device
        self.n_layers = int(self.model.config.num_hidden_layers)

    def generate(self, prompt: str) -> str:
        raise NotImplementedError(
            "generation requires a text-generation head; serve the model "
            "separately and pass its outputs in, or use this backend only "
            "for hidden-state extraction")

    def hidden_states(self, prompt: str) -> np.ndarray:
        tokens = self.tokenizer(prompt, return_tensors="pt", truncation=True,
                                max_length=self.max_length).to(self.device)
        with self._torch.no_grad():
            out = self.model(**tokens)
        layers = [h[0, -1, :].cpu().numpy() for h in out.hidden_states]
        return np.stack(layers).astype(np.float32)


@dataclass
class FileScores:
    """Scores keyed by instance id from a JSON or JSONL file.

    JSON form: {"id": {"s_no_tool": x, "s_always_tool": y}, ...}
    JSONL form: one {"instance_id", "s_no_tool", "s_always_tool"} per line.
    """

    table: dict[str, tuple[float, float]]

    @classmethod
    def load(cls, path: str | Path) -> "FileScores":
        path = Path(path)
        text = path.read_text(encoding="utf-8").strip()
        table: dict[str, tuple[float, float]] = {}
        whole = None
        try:
            whole = json.loads(text)
        except json.JSONDecodeError:
            pass
        if (isinstance(whole, dict)
                and whole and all(isinstance(v, dict) for v in whole.values())):
            for instance_id, entry in whole.items():
                table[instance_id] = (float(entry["s_no_tool"]),
                                      float(entry["s_always_tool"]))
        else:
            for line in text.splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                table[str(entry["instance_id"])] = (float(entry["s_no_tool"]),
                                                    float(entry["s_always_tool"]))
        return cls(table=table)

    def __call__(self, instance_id: str, query: str) -> tuple[float, float]:
        if instance_id not in self.table:
            raise KeyError(f"no scores for instance {instance_id!r}")
        return self.table[instance_id]


@dataclass
class HttpScorer:
    """Delegates scoring to an external judge endpoint.

    POSTs {"instance_id", "query"} and expects
    {"s_no_tool": x, "s_always_tool": y} back.
    """

    url: str
    timeout: float = 30.0

    def __call__(self, instance_id: str, query: str) -> tuple[float, float]:
        payload = json.dumps({"instance_id": instance_id, "query": query}).encode()
        req = urllib.request.Request(
            self.url, data=payload, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        return float(body["s_no_tool"]), float(body["s_always_tool"])
