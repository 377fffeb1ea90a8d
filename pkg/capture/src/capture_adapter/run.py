"""Capture runner: drives a model through the recording conditions and
emits a conforming trace plus per-layer EMB1 embedding files.

The run is append-only and resumable: instances already present in the
trace file are skipped, and embedding matrices grow row-aligned with the
capture order. Scoring is always delegated (a score file or a judge
endpoint); search backends are injected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .artifacts import TraceWriter, embedding_file_name, read_emb, write_emb
from .backends import ModelBackend, SearchClient
from .prompts import (
    DEFAULT_TOOL_DESCRIPTION,
    PERCEIVED_VARIANTS,
    answer_with_results_prompt,
    apply_forced_call,
    budget_line,
    decision_prompt,
    forced_call_prompt,
    parse_decision,
    parse_perceived_need,
    perceived_need_prompt,
    task_prompt,
)

CONDITIONS = ("no_tool", "always_tool", "self_decision", "perceived_need")
EMBEDDING_CONDITIONS = ("no_tool_input", "with_tool_desc")

ScoreSource = Callable[[str, str], tuple[float, float]]


@dataclass(frozen=True)
class CaptureConfig:
    model_id: str
    task_file: str | Path
    out_dir: str | Path
    tool_description: str = DEFAULT_TOOL_DESCRIPTION
    conditions: tuple[str, ...] = CONDITIONS
    perceived_variants: tuple[str, ...] = PERCEIVED_VARIANTS
    cost_variant: str | None = None  # None, "explicit", or "implicit"
    total_budget: float = 10000.0
    per_call_cost: float = 25.0
    embedding_conditions: tuple[str, ...] = EMBEDDING_CONDITIONS
    layers: tuple[int, ...] | None = None  # None = every layer incl. layer 0
    trace_name: str = "trace.jsonl"
    task_name: str = "capture"
    search_count: int = 5

    def __post_init__(self):
        for cond in self.conditions:
            if cond not in CONDITIONS:
                raise ValueError(f"unknown condition {cond!r}")
        for cond in self.embedding_conditions:
            if cond not in EMBEDDING_CONDITIONS:
                raise ValueError(f"unknown embedding condition {cond!r}")
        for variant in self.perceived_variants:
            if variant not in PERCEIVED_VARIANTS:
                raise ValueError(f"unknown perceived variant {variant!r}")
        if self.cost_variant not in (None, "explicit", "implicit"):
            raise ValueError(f"unknown cost variant {self.cost_variant!r}")
        # one output file per (condition, layer); the naming scheme keeps
        # them distinct by construction, but a duplicate condition list
        # would silently overwrite
        if len(set(self.embedding_conditions)) != len(self.embedding_conditions):
            raise ValueError("duplicate embedding conditions")


@dataclass
class CaptureSummary:
    trace_path: Path
    embedding_paths: list[Path]
    n_new: int
    n_skipped: int
    unparseable_decisions: int = 0


def read_task_file(path: str | Path) -> list[tuple[str, str]]:
    """(instance_id, query) pairs: either one query per line or JSON
    objects carrying instance_id/query fields."""
    tasks: list[tuple[str, str]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                obj = json.loads(line)
                instance_id = str(obj.get("instance_id") or obj.get("id")
                                  or f"task-{i:05d}")
                tasks.append((instance_id, str(obj["query"])))
            else:
                tasks.append((f"task-{i:05d}", line))
    if not tasks:
        raise ValueError(f"task file {path} holds no tasks")
    return tasks


def extract_hidden_states(prompts: Sequence[str], model: ModelBackend,
                          layers: Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Per-layer matrices of last-token states; row i belongs to prompt i.

    Layer 0 is the input embedding layer, so a model with L blocks yields
    L + 1 layers. Failures carry the offending prompt index.
    """
    wanted = list(layers) if layers is not None else None
    rows: dict[int, list[np.ndarray]] = {}
    for i, prompt in enumerate(prompts):
        try:
            states = np.asarray(model.hidden_states(prompt), dtype=np.float32)
        except Exception as exc:
            raise RuntimeError(f"hidden-state extraction failed at prompt {i}: "
                               f"{exc}") from exc
        n_available = states.shape[0]
        chosen = wanted if wanted is not None else range(n_available)
        for layer in chosen:
            if not (0 <= layer < n_available):
                raise ValueError(f"layer {layer} out of range at prompt {i}: "
                                 f"model yields {n_available} layers")
            rows.setdefault(layer, []).append(states[layer])
    return {layer: np.stack(mats) for layer, mats in rows.items()}


def write_layer_files(matrices: Mapping[int, np.ndarray], condition: str,
                      model_id: str, out_dir: Path) -> list[Path]:
    paths = []
    for layer in sorted(matrices):
        path = out_dir / embedding_file_name(condition, layer)
        write_emb(matrices[layer], layer, model_id, path)
        paths.append(path)
    return paths


def _self_decision(model: ModelBackend, search: SearchClient,
                   config: CaptureConfig, query: str,
                   n_questions: int, n_finished: int, n_calls: int
                   ) -> tuple[bool, dict[str, str], bool]:
    """Returns (called, raw_texts, unparseable)."""
    cost_line = None
    if config.cost_variant is not None:
        cost_line = budget_line(config.per_call_cost, config.total_budget,
                                n_questions, n_finished, n_calls,
                                explicit=config.cost_variant == "explicit")
    prompt = decision_prompt(query, config.tool_description, cost_line)
    response = model.generate(prompt)
    decision = parse_decision(response)
    if decision is None:
        # no valid tool request was made, so no tool runs
        return False, {"query": query}, True
    if not decision["needs_tool"]:
        output = model.generate(task_prompt(query))
        return False, {"query": query, "output": output}, False
    tool_query = decision["tool_input"] or query
    results = search.search(tool_query, config.search_count)
    output = model.generate(answer_with_results_prompt(query, results))
    raw = {
        "query": tool_query,
        "tool_response": json.dumps(results, separators=(",", ":")),
        "output": output,
    }
    return True, raw, False


def _always_tool(model: ModelBackend, search: SearchClient,
                 config: CaptureConfig, query: str) -> dict[str, str]:
    """Forced-call pass: the model must request the tool; anything else is
    overridden to a call with the original query as the tool input."""
    response = model.generate(forced_call_prompt(query, config.tool_description))
    decision = apply_forced_call(parse_decision(response), query)
    results = search.search(decision["tool_input"], config.search_count)
    output = model.generate(answer_with_results_prompt(query, results))
    return {
        "query": decision["tool_input"],
        "tool_response": json.dumps(results, separators=(",", ":")),
        "output": output,
    }


def capture_run(config: CaptureConfig, model: ModelBackend,
                search: SearchClient, scores: ScoreSource) -> CaptureSummary:
    """Run every configured condition over the task list.

    Emits ``trace.jsonl`` plus one EMB1 file per (embedding condition,
    layer) into ``config.out_dir``; everything the consumer's validator
    checks holds by construction.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = read_task_file(config.task_file)

    provenance = {
        "generator": "capture_adapter",
        "model_id": config.model_id,
        "hidden_state_policy": "last-token per layer; prompts truncated "
                               "right at the backend's context limit",
    }
    trace_path = out_dir / config.trace_name
    writer = TraceWriter(trace_path, provenance=provenance)

    # resume: reload embedding rows already on disk, aligned with the
    # records already in the trace
    emb_rows: dict[tuple[str, int], list[np.ndarray]] = {}
    if writer.n_existing:
        for cond in config.embedding_conditions:
            for path in sorted(out_dir.glob(f"{cond}_layer*.emb")):
                values, header = read_emb(path)
                if values.shape[0] != writer.n_existing:
                    raise ValueError(
                        f"{path} holds {values.shape[0]} rows but the trace "
                        f"has {writer.n_existing} records; cannot resume")
                emb_rows[(cond, header["layer"])] = list(values)

    row_index = writer.n_existing
    n_new = n_skipped = unparseable = 0
    n_calls = 0

    with writer:
        for seq_offset, (instance_id, query) in enumerate(tasks):
            if instance_id in writer.existing_ids:
                n_skipped += 1
                continue

            raw_texts: dict[str, str] = {}
            called = False
            if "no_tool" in config.conditions:
                model.generate(task_prompt(query))
            if "always_tool" in config.conditions:
                forced_raw = _always_tool(model, search, config, query)
                if "self_decision" not in config.conditions:
                    # purely forced run: the forced call is the observed
                    # decision
                    called = True
                    raw_texts = forced_raw
            if "self_decision" in config.conditions:
                called, raw_texts, bad = _self_decision(
                    model, search, config, query,
                    n_questions=len(tasks), n_finished=seq_offset,
                    n_calls=n_calls)
                unparseable += bad
                n_calls += int(called)

            perceived: dict[str, bool | None] = {}
            if "perceived_need" in config.conditions:
                for variant in config.perceived_variants:
                    response = model.generate(perceived_need_prompt(query, variant))
                    perceived[variant] = parse_perceived_need(response, variant)

            refs = {}
            if config.embedding_conditions:
                prompts = {
                    "no_tool_input": task_prompt(query),
                    "with_tool_desc": decision_prompt(query, config.tool_description),
                }
                for cond in config.embedding_conditions:
                    states = extract_hidden_states([prompts[cond]], model,
                                                   config.layers)
                    for layer, mat in states.items():
                        emb_rows.setdefault((cond, layer), []).append(mat[0])
                    refs[cond] = {
                        "path": embedding_file_name(cond, min(states)),
                        "row": row_index,
                        "layer": min(states),
                    }

            s_no_tool, s_always_tool = scores(instance_id, query)
            record = {
                "instance_id": instance_id,
                "seq_index": row_index,
                "task_name": config.task_name,
                "model_id": config.model_id,
                "s_no_tool": s_no_tool,
                "s_always_tool": s_always_tool,
                "self_called": called,
                "self_call_count": 1 if called else 0,
            }
            if perceived:
                record["perceived_need"] = perceived
            if refs:
                record["embedding_refs"] = refs
            if raw_texts:
                record["raw_texts"] = raw_texts
            writer.append(record)
            row_index += 1
            n_new += 1

    emb_paths = []
    for (cond, layer), rows in sorted(emb_rows.items()):
        path = out_dir / embedding_file_name(cond, layer)
        write_emb(np.stack(rows), layer, config.model_id, path)
        emb_paths.append(path)

    return CaptureSummary(trace_path=trace_path, embedding_paths=emb_paths,
                          n_new=n_new, n_skipped=n_skipped,
                          unparseable_decisions=unparseable)
