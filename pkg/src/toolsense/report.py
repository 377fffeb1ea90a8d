"""Deterministic CSV / Markdown emission of every analysis artifact.

Floats print with 6 significant digits, counts as integers, and the same
formatter feeds both formats, so each Markdown cell equals its CSV
counterpart. Re-running with identical inputs yields byte-identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .alignment import ConfusionMatrix2, VennCounts, VENN_REGIONS
from .budget import GainCurvePoint
from .estimators import LayerSearchResult
from .labels import BUCKET_NAMES, BucketMatrix
from .policy import PolicyOutcome


def fmt(value) -> str:
    """Locale-independent cell text."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        if value != value:  # NaN
            return "nan"
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return f"{value:.6g}"
    return str(value)


@dataclass
class Table:
    name: str
    headers: list[str]
    rows: list[list]
    note: str = ""

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.headers)
        for row in self.rows:
            writer.writerow([fmt(cell) for cell in row])
        return buf.getvalue()

    def md_text(self) -> str:
        lines = [f"## {self.name}", ""]
        lines.append("| " + " | ".join(self.headers) + " |")
        lines.append("|" + "|".join(" --- " for _ in self.headers) + "|")
        for row in self.rows:
            lines.append("| " + " | ".join(fmt(cell) for cell in row) + " |")
        if self.note:
            lines.extend(["", self.note])
        lines.append("")
        return "\n".join(lines)


@dataclass
class ReportBundle:
    """Named report sections; absent sections are skipped by emit."""

    policy_table: list[tuple[str, PolicyOutcome]] | None = None
    bucket_matrix: BucketMatrix | None = None
    confusions: dict[str, ConfusionMatrix2] = field(default_factory=dict)
    venn: VennCounts | None = None
    gain_curves: dict[str, list[GainCurvePoint]] = field(default_factory=dict)
    layer_search: LayerSearchResult | None = None


def _policy_table(entries: list[tuple[str, PolicyOutcome]]) -> Table:
    rows = [[name, outcome.mean_score, outcome.total_calls] for name, outcome in entries]
    return Table(name="policy_table", headers=["policy", "score", "calls"], rows=rows,
                 note="score is the mean per-instance score; calls counts tool calls.")


def _bucket_table(matrix: BucketMatrix) -> Table:
    rows = [[BUCKET_NAMES[i]] + [int(c) for c in matrix.counts[i]] for i in range(3)]
    rows.append([
        "regions",
        f"positive={matrix.positive},negative={matrix.negative},neutral={matrix.neutral}",
        f"need_positive={matrix.need_positive},need_total={matrix.need_total}",
        f"need_positive_rate={fmt(matrix.need_positive_rate)}",
    ])
    return Table(name="bucket_matrix",
                 headers=["no_tool_bucket"] + list(BUCKET_NAMES), rows=rows,
                 note="rows bucket the No-Tool score, columns the Always-Tool score.")


def _confusion_table(name: str, cm: ConfusionMatrix2) -> Table:
    rows = [
        [f"{cm.row_label}=0", int(cm.counts[0, 0]), int(cm.counts[0, 1])],
        [f"{cm.row_label}=1", int(cm.counts[1, 0]), int(cm.counts[1, 1])],
        ["accuracy", cm.accuracy, None],
        ["balanced_accuracy", cm.balanced_accuracy, None],
        ["excluded", cm.excluded, None],
    ]
    return Table(name=name, headers=["", f"{cm.col_label}=0", f"{cm.col_label}=1"], rows=rows)


def _venn_table(venn: VennCounts) -> Table:
    rows = [[region, venn.regions[region]] for region in VENN_REGIONS]
    rows.append(["call_without_need", venn.c_minus_b])
    rows.append(["need_without_gain", venn.b_minus_a])
    rows.append(["call_without_gain", venn.c_minus_a])
    rows.append(["excluded", venn.excluded])
    return Table(name="venn", headers=["region", "count"], rows=rows,
                 note="a=true positive utility, b=perceived need, c=tool called; "
                      "region keys are exclusive intersections.")


def _gain_table(name: str, points: Sequence[GainCurvePoint]) -> Table:
    rows = [[p.cost, p.coverage_pct, p.gain, p.calls_made, p.ndcg] for p in points]
    return Table(name=name, headers=["cost", "coverage_pct", "gain", "calls", "ndcg"],
                 rows=rows)


def _layer_table(result: LayerSearchResult) -> Table:
    rows = [[e.layer, e.accuracy,
             "x".join(str(w) for w in e.spec.hidden_layers) or "linear",
             e.spec.learning_rate] for e in result.table]
    return Table(name="layer_search",
                 headers=["layer", "oof_accuracy", "hidden_layers", "learning_rate"],
                 rows=rows,
                 note=f"selected layer: {result.best_layer}")


def build_tables(bundle: ReportBundle) -> list[Table]:
    tables: list[Table] = []
    if bundle.policy_table is not None:
        tables.append(_policy_table(bundle.policy_table))
    if bundle.bucket_matrix is not None:
        tables.append(_bucket_table(bundle.bucket_matrix))
    for name in bundle.confusions:
        tables.append(_confusion_table(name, bundle.confusions[name]))
    if bundle.venn is not None:
        tables.append(_venn_table(bundle.venn))
    for name in bundle.gain_curves:
        tables.append(_gain_table(f"gain_curve_{name}", bundle.gain_curves[name]))
    if bundle.layer_search is not None:
        tables.append(_layer_table(bundle.layer_search))
    return tables


README_HEADER = """# Analysis artifacts

Generated report files. Every numeric cell in a Markdown table equals its
CSV counterpart; floats carry 6 significant digits, counts are integers.

Columns:
- policy_table: policy, score (mean per-instance), calls (tool calls made)
- bucket_matrix: 3x3 counts (No-Tool bucket rows, Always-Tool bucket
  columns) plus a region-summary row
- *_confusion / consistency: 2x2 counts (rows true or stated label,
  columns predicted or acted label) with accuracy, balanced accuracy, and
  the number of excluded records
- venn: exclusive region counts over true positive utility / perceived
  need / tool called, plus containment-violation counts
- gain_curve_*: cost, coverage_pct, gain, calls, ndcg (one row per cost
  level; ndcg empty when the call cap is zero)
- layer_search: layer, oof_accuracy, hidden_layers, learning_rate

Files:
"""


def emit(bundle: ReportBundle, out_dir: str | Path,
         formats: Sequence[str] = ("csv", "md")) -> list[str]:
    """Write every present section; returns the sorted file manifest.

    File names are fixed by section name, so identical inputs rewrite
    identical trees.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc

    unknown = [f for f in formats if f not in ("csv", "md")]
    if unknown:
        raise ValueError(f"unknown formats: {unknown}")

    manifest: list[str] = []
    for table in build_tables(bundle):
        if "csv" in formats:
            name = f"{table.name}.csv"
            (out_dir / name).write_text(table.csv_text(), encoding="utf-8")
            manifest.append(name)
        if "md" in formats:
            name = f"{table.name}.md"
            (out_dir / name).write_text(table.md_text(), encoding="utf-8")
            manifest.append(name)

    manifest_sorted = sorted(manifest)
    readme = README_HEADER + "".join(f"- {name}\n" for name in manifest_sorted)
    (out_dir / "README.md").write_text(readme, encoding="utf-8")
    return ["README.md"] + manifest_sorted
