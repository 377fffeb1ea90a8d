"""Single entry point wiring all modules: validate, label, align, afford,
train, simulate, serve, report.

Options resolve as: built-in defaults < config file (--config, JSON object
mirroring the flag names) < explicit flags. Exit codes: 0 success,
1 validation findings, 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import alignment, budget, estimators, labels, policy, report, service
from .mlp import DEFAULT_GRID, MlpSpec, SMALL_GRID
from .traces import (
    EmbeddingStore,
    TraceParseError,
    TraceSet,
    parse_trace_file,
    validate,
)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2

# Every analytic default lives here.
DEFAULTS: dict = {
    "low_hi": 0.1,
    "high_lo": 0.9,
    "need_threshold": 0.9,
    "eps": 1e-9,
    "tau": 0.5,
    "budget": 10000.0,
    "cost": 25.0,
    "cost_levels": [0.0, 20.0, 25.0, 40.0, 50.0, 100.0, 200.0],
    "folds": 5,
    "seed": 42,
    "variant": "v1",
    "estimator": "lne",
    "layer": "auto",
    "grid": "full",
    "bind": "127.0.0.1:8080",
    "k": None,
}

ESTIMATOR_FLAG_TO_KIND = {"lne": "LNE", "lue-x": "LUE_x", "lue-xd": "LUE_xd"}


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    return obj


def _opt(args: argparse.Namespace, config: dict, name: str):
    """Flags win over the config file, which wins over DEFAULTS."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in config:
        return config[name]
    return DEFAULTS.get(name)


def _require(args: argparse.Namespace, config: dict, name: str):
    value = _opt(args, config, name)
    if value is None:
        raise UsageError(f"missing required option --{name.replace('_', '-')}")
    return value


def _load_trace(path: str) -> TraceSet:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"trace file not found: {p}")
    return parse_trace_file(p)


def _resolve_grid(value) -> tuple[MlpSpec, ...]:
    if value == "full":
        return DEFAULT_GRID
    if value == "small":
        return SMALL_GRID
    if isinstance(value, list):
        return tuple(
            MlpSpec(hidden_layers=tuple(entry.get("hidden_layers", [128])),
                    learning_rate=float(entry.get("learning_rate", 1e-3)))
            for entry in value)
    raise UsageError(f"unknown grid {value!r}; use 'small', 'full', or a config list")


def _store(args: argparse.Namespace, config: dict) -> EmbeddingStore:
    emb_dir = _require(args, config, "embeddings")
    p = Path(emb_dir)
    if not p.is_dir():
        raise UsageError(f"embeddings directory not found: {p}")
    return EmbeddingStore(base_dir=p)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace, config: dict) -> int:
    path = Path(_require(args, config, "trace"))
    if not path.exists():
        raise UsageError(f"trace file not found: {path}")
    try:
        ts = parse_trace_file(path)
    except TraceParseError as exc:
        print(f"finding: {exc}")
        print("1 finding")
        return EXIT_FINDINGS
    findings = validate(ts, check_embeddings=True)
    for v in findings:
        print(f"finding: {v}")
    print(f"{len(findings)} finding(s) in {len(ts)} record(s)")
    return EXIT_FINDINGS if findings else EXIT_OK


def cmd_label(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    th = labels.BucketThresholds(low_hi=float(_opt(args, config, "low_hi")),
                                 high_lo=float(_opt(args, config, "high_lo")))
    matrix = labels.bucket_transition_matrix(ts, th)
    bundle = report.ReportBundle(bucket_matrix=matrix)
    manifest = report.emit(bundle, _require(args, config, "out"))
    print("\n".join(manifest))
    return EXIT_OK


def _alignment_sections(ts: TraceSet, variant: str, eps: float,
                        need_threshold: float) -> report.ReportBundle:
    bundle = report.ReportBundle()
    bundle.confusions["utility_confusion"] = alignment.utility_confusion(ts, eps)
    try:
        bundle.confusions["need_confusion"] = alignment.need_confusion(
            ts, variant, need_threshold)
        bundle.confusions["consistency"] = alignment.consistency_matrix(ts, variant)
        bundle.venn = alignment.venn_counts(ts, variant, eps, need_threshold)
    except ValueError as exc:
        print(f"note: skipping perceived-need sections: {exc}", file=sys.stderr)
    return bundle


def cmd_align(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    bundle = _alignment_sections(
        ts, str(_opt(args, config, "variant")), float(_opt(args, config, "eps")),
        float(_opt(args, config, "need_threshold")))
    manifest = report.emit(bundle, _require(args, config, "out"))
    print("\n".join(manifest))
    return EXIT_OK


def _afford_sections(ts: TraceSet, eps: float, total_budget: float,
                     cost_levels: list[float]) -> report.ReportBundle:
    bundle = report.ReportBundle()
    bundle.gain_curves["oracle"] = budget.gain_curve(
        ts, budget.oracle_selector(ts, eps), cost_levels, total_budget)
    bundle.gain_curves["self_decision"] = budget.gain_curve(
        ts, budget.observed_selector(budget.self_decision_ids(ts)), cost_levels,
        total_budget)
    return bundle


def cmd_afford(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    levels = _opt(args, config, "cost_levels")
    if isinstance(levels, str):
        levels = [float(x) for x in levels.split(",") if x.strip()]
    bundle = _afford_sections(ts, float(_opt(args, config, "eps")),
                              float(_opt(args, config, "budget")), list(levels))
    manifest = report.emit(bundle, _require(args, config, "out"))
    print("\n".join(manifest))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    store = _store(args, config)
    estimator_flag = str(_opt(args, config, "estimator"))
    if estimator_flag not in ESTIMATOR_FLAG_TO_KIND:
        raise UsageError(f"unknown estimator {estimator_flag!r}; "
                         f"choose from {sorted(ESTIMATOR_FLAG_TO_KIND)}")
    kind = ESTIMATOR_FLAG_TO_KIND[estimator_flag]
    layer = _opt(args, config, "layer")
    if layer != "auto":
        layer = int(layer)
    grid = _resolve_grid(_opt(args, config, "grid"))
    out_dir = Path(_require(args, config, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle, search = estimators.fit_bundle(
        ts, store, kind, grid, layer=layer,
        k=int(_opt(args, config, "folds")), seed=int(_opt(args, config, "seed")),
        need_threshold=float(_opt(args, config, "need_threshold")),
        eps=float(_opt(args, config, "eps")))

    bundle_path = out_dir / f"bundle_{estimator_flag.replace('-', '_')}.esb"
    estimators.save_bundle(bundle, bundle_path)
    (out_dir / "cv_metrics.json").write_text(
        json.dumps(bundle.cv_summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rb = report.ReportBundle(layer_search=search)
    manifest = report.emit(rb, out_dir)
    print("\n".join([bundle_path.name, "cv_metrics.json"] + manifest))
    return EXIT_OK


def _policy_entries(ts: TraceSet, eps: float, store: EmbeddingStore | None,
                    bundle_path: str | None, tau: float, top_k: int | None
                    ) -> list[tuple[str, policy.PolicyOutcome]]:
    context = policy.PolicyContext(eps=eps, store=store)
    kinds: list[policy.PolicyKind] = [policy.NoTool(), policy.AlwaysTool(),
                                      policy.SelfDecision(), policy.Oracle()]
    if bundle_path is not None:
        est = estimators.load_bundle(bundle_path)
        kinds.append(policy.EstimatorThreshold(bundle=est, tau=tau))
        if top_k is not None:
            kinds.append(policy.EstimatorBudget(bundle=est, k=int(top_k)))
    return [(policy.policy_label(kind), policy.evaluate_policy(ts, kind, context))
            for kind in kinds]


def cmd_simulate(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    bundle_path = _opt(args, config, "bundle")
    store = None
    if bundle_path is not None:
        if not Path(bundle_path).exists():
            raise UsageError(f"bundle file not found: {bundle_path}")
        store = _store(args, config)
    entries = _policy_entries(ts, float(_opt(args, config, "eps")), store,
                              bundle_path, float(_opt(args, config, "tau")),
                              _opt(args, config, "k"))
    rb = report.ReportBundle(policy_table=entries)
    manifest = report.emit(rb, _require(args, config, "out"))
    print("\n".join(manifest))
    return EXIT_OK


def _serve_opt(args: argparse.Namespace, config: dict, name: str):
    """Serve options also fall back to TOOLSENSE_<NAME> environment vars
    (flags > config file > environment > defaults)."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in config:
        return config[name]
    env = os.environ.get(f"TOOLSENSE_{name.upper()}")
    if env is not None:
        return env
    return DEFAULTS.get(name)


def cmd_serve(args: argparse.Namespace, config: dict) -> int:
    bundle_path = _serve_opt(args, config, "bundle")
    if bundle_path is None:
        raise UsageError("missing required option --bundle")
    if not Path(bundle_path).exists():
        raise UsageError(f"bundle file not found: {bundle_path}")
    bind = str(_serve_opt(args, config, "bind"))
    host, _, port_text = bind.partition(":")
    if not host or not port_text.isdigit():
        raise UsageError(f"--bind must be HOST:PORT, got {bind!r}")
    svc = service.load_service(
        bundle_path,
        total_budget=float(_serve_opt(args, config, "budget")),
        per_call_cost=float(_serve_opt(args, config, "cost")),
        tau=float(_serve_opt(args, config, "tau")),
        embeddings_path=_serve_opt(args, config, "embeddings_file"),
    )
    service.serve(svc, host, int(port_text))
    return EXIT_OK


def cmd_report(args: argparse.Namespace, config: dict) -> int:
    ts = _load_trace(_require(args, config, "trace"))
    eps = float(_opt(args, config, "eps"))
    need_threshold = float(_opt(args, config, "need_threshold"))
    th = labels.BucketThresholds(low_hi=float(_opt(args, config, "low_hi")),
                                 high_lo=float(_opt(args, config, "high_lo")))
    rb = _alignment_sections(ts, str(_opt(args, config, "variant")), eps, need_threshold)
    rb.bucket_matrix = labels.bucket_transition_matrix(ts, th)
    levels = _opt(args, config, "cost_levels")
    if isinstance(levels, str):
        levels = [float(x) for x in levels.split(",") if x.strip()]
    afford = _afford_sections(ts, eps, float(_opt(args, config, "budget")), list(levels))
    rb.gain_curves = afford.gain_curves
    rb.policy_table = _policy_entries(ts, eps, None, None,
                                      float(_opt(args, config, "tau")), None)
    manifest = report.emit(rb, _require(args, config, "out"))
    print("\n".join(manifest))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolsense",
        description="Evaluate and control tool-calling decisions from recorded traces.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--trace", help="trace file (newline-delimited records)")
        p.add_argument("--embeddings", help="directory of EMB1 files")
        p.add_argument("--out", help="output directory for artifacts")
        p.add_argument("--need-threshold", dest="need_threshold", type=float)
        p.add_argument("--eps", type=float)
        p.add_argument("--seed", type=int)
        return p

    add("validate", cmd_validate, "check a trace file; exit 1 on findings")

    p = add("label", cmd_label, "emit the bucket-transition matrix")
    p.add_argument("--low-hi", dest="low_hi", type=float)
    p.add_argument("--high-lo", dest="high_lo", type=float)

    p = add("align", cmd_align, "emit confusion / consistency / Venn tables")
    p.add_argument("--variant", choices=("v1", "v2", "v3"))

    p = add("afford", cmd_afford, "emit gain and NDCG curves")
    p.add_argument("--budget", type=float)
    p.add_argument("--cost-levels", dest="cost_levels",
                   help="comma-separated per-call costs")

    p = add("train", cmd_train, "train an estimator bundle")
    p.add_argument("--estimator", choices=tuple(ESTIMATOR_FLAG_TO_KIND))
    p.add_argument("--layer", help="'auto' or a layer index")
    p.add_argument("--grid", help="'small', 'full', or set in the config file")
    p.add_argument("--folds", type=int)

    p = add("simulate", cmd_simulate, "evaluate policies into a score/calls table")
    p.add_argument("--bundle", help="estimator bundle for controller policies")
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=int, help="budget cap for the top-K controller")

    p = add("serve", cmd_serve, "serve decisions over HTTP")
    p.add_argument("--bundle")
    p.add_argument("--bind", help="HOST:PORT")
    p.add_argument("--budget", type=float)
    p.add_argument("--cost", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--embeddings-file", dest="embeddings_file",
                   help="EMB1 file enabling row-reference requests")

    p = add("report", cmd_report, "emit every analysis section")
    p.add_argument("--variant", choices=("v1", "v2", "v3"))
    p.add_argument("--budget", type=float)
    p.add_argument("--cost-levels", dest="cost_levels")
    p.add_argument("--low-hi", dest="low_hi", type=float)
    p.add_argument("--high-lo", dest="high_lo", type=float)
    p.add_argument("--tau", type=float)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(getattr(args, "config", None))
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceParseError as exc:
        print(f"finding: {exc}", file=sys.stderr)
        return EXIT_FINDINGS


if __name__ == "__main__":
    sys.exit(main())
