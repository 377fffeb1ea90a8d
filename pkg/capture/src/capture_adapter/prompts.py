"""Prompt rendering and response parsing for the capture conditions.

Stage 1 asks the model whether to call the search tool (a structured JSON
decision object); stage 2 generates the answer, with search results
injected when a call was made. Stated-need prompts come in three variants:
a JSON-only schema (v1), "do you need help" (v2), and "do you know the
answer" (v3, inverted when parsed).
"""

from __future__ import annotations

import json
import math
import re

DEFAULT_TOOL_DESCRIPTION = (
    "web_search: Search the web for current information about entities, "
    "facts, or topics. Use this when you need up-to-date or factual "
    "information you don't have."
)

PERCEIVED_VARIANTS = ("v1", "v2", "v3")

_DECISION_SCHEMA = (
    "{\n"
    '    "needs_tool": true/false,\n'
    '    "tool_name": "tool_name" or null,\n'
    '    "tool_input": "the input you need to give to the tool",\n'
    '    "reasoning": "why you need this tool or why you don\'t need tools"\n'
    "}"
)

_RULES = (
    "Rules:\n"
    "- Only use tools when you genuinely need external information\n"
    "- If you already know the answer, set needs_tool to false\n"
    "- Only select ONE tool at a time"
)


def budget_line(per_call_cost: float, total_budget: float, n_questions: int,
                n_finished: int, n_calls: int, explicit: bool) -> str:
    """Running budget status injected into the tool list.

    The explicit form states the remaining-call count
    y = floor((budget - cost * calls) / cost); the implicit form leaves the
    arithmetic to the model.
    """
    base = (f"- Each tool call costs ${per_call_cost:g}. You have a total "
            f"budget of ${total_budget:g}. You have {n_questions} questions "
            f"in total, have already answered {n_finished}, and have made "
            f"{n_calls} tool calls so far.")
    if not explicit:
        return base
    remaining = max(0, math.floor((total_budget - per_call_cost * n_calls)
                                  / per_call_cost))
    return base + f" You have {remaining} tool calls remaining."


def decision_prompt(query: str, tool_description: str = DEFAULT_TOOL_DESCRIPTION,
                    cost_line: str | None = None) -> str:
    """Stage-1 self-decision prompt with the tool description included."""
    tools = f"- {tool_description}"
    if cost_line:
        tools += "\n" + cost_line
    return (
        "You are an intelligent agent that decides when to use tools to "
        "answer questions.\n"
        "You have access to the following tools:\n"
        f"{tools}\n"
        f"Given the user's question: \"{query}\"\n"
        "Decide if you need to use any tools. Respond with a JSON object:\n"
        f"{_DECISION_SCHEMA}\n"
        f"{_RULES}"
    )


def forced_call_prompt(query: str,
                       tool_description: str = DEFAULT_TOOL_DESCRIPTION) -> str:
    """Stage-1 prompt that instructs the model to call the tool."""
    return (
        "You are an intelligent agent that decides when to use tools to "
        "answer questions.\n"
        "You have access to the following tools:\n"
        f"- {tool_description}\n"
        f"Given the user's question: \"{query}\"\n"
        "Use this tool. Respond with a JSON object:\n"
        "{\n"
        '    "needs_tool": true,\n'
        '    "tool_input": "the input you need to give to the tool"\n'
        "}"
    )


def perceived_need_prompt(query: str, variant: str) -> str:
    """Stated-need probes; none of them mention what the tool is."""
    head = ("You are an intelligent agent that decides when to use tools "
            "to answer questions.\n"
            f"Given the user's question: \"{query}\"\n")
    if variant == "v1":
        return (head
                + "You can call for help from a tool.\n"
                  "Respond with ONLY a JSON object in this exact schema:\n"
                  '{\n    "needs_tool": true,\n}\n'
                  "or\n"
                  '{\n    "needs_tool": false,\n}')
    if variant == "v2":
        return head + "Do you need help to answer the question?\nAnswer:"
    if variant == "v3":
        return head + "Do you know the answer to the question?\nAnswer:"
    raise ValueError(f"unknown perceived-need variant {variant!r}")


def task_prompt(query: str) -> str:
    """Stage-2 prompt without any tool involvement (also the no_tool_input
    hidden-state condition)."""
    return query


def answer_with_results_prompt(query: str, results: list[dict]) -> str:
    """Stage-2 prompt with search results injected."""
    lines = ["Based on the following search results, please answer the "
             "question.", "", "Search Results:", ""]
    for i, result in enumerate(results, start=1):
        lines.append(f"{i}. {result.get('title', '')}")
        lines.append(f"   {result.get('snippet', '')}")
        lines.append(f"   Source: {result.get('url', '')}")
        lines.append("")
    lines.append(f"Question: {query}")
    return "\n".join(lines)


def _find_json_object(text: str) -> dict | None:
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    snippet = text[start:end + 1]
    # tolerate trailing commas, which small models emit constantly
    snippet = re.sub(r",\s*([}\]])", r"\1", snippet)
    try:
        obj = json.loads(snippet)
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def parse_decision(text: str) -> dict | None:
    """Parse a stage-1 decision object; None when unparseable.

    Returns {"needs_tool": bool, "tool_name": str | None,
    "tool_input": str | None}.
    """
    obj = _find_json_object(text)
    if obj is None or not isinstance(obj.get("needs_tool"), bool):
        return None
    tool_input = obj.get("tool_input")
    return {
        "needs_tool": obj["needs_tool"],
        "tool_name": obj.get("tool_name"),
        "tool_input": str(tool_input) if tool_input is not None else None,
    }


def apply_forced_call(decision: dict | None, query: str) -> dict:
    """Exact-match check for the forced condition: keep a parsed
    needs_tool=true; anything else becomes a call with the original query
    as the tool input."""
    if decision is not None and decision["needs_tool"] is True:
        if decision.get("tool_input"):
            return decision
        return {**decision, "tool_input": query}
    return {"needs_tool": True, "tool_name": "web_search", "tool_input": query}


_YES = re.compile(r"\b(yes|yeah|yep|i do|i need)\b", re.IGNORECASE)
_NO = re.compile(r"\b(no|nope|i don't|i do not|not needed)\b", re.IGNORECASE)


def parse_perceived_need(text: str, variant: str) -> bool | None:
    """Parse a stated-need answer; None when no clear signal.

    v1 carries a JSON needs_tool flag; v2 is a direct need question; v3
    asks whether the model knows the answer, so a yes means no need.
    """
    if variant == "v1":
        obj = _find_json_object(text)
        if obj is None or not isinstance(obj.get("needs_tool"), bool):
            return None
        return obj["needs_tool"]
    if variant in ("v2", "v3"):
        yes = bool(_YES.search(text))
        no = bool(_NO.search(text))
        if yes == no:
            return None
        answer = yes
        return (not answer) if variant == "v3" else answer
    raise ValueError(f"unknown perceived-need variant {variant!r}")
