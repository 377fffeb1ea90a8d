"""Latent need/utility estimators: stratified cross-validation with
out-of-fold predictions, hyperparameter grid search, per-layer search, and
the serializable estimator bundle served by the decision service.

Estimator kinds:
  LNE     predicts true need from no_tool_input hidden states
  LUE_x   predicts binarized true utility from no_tool_input hidden states
  LUE_xd  predicts binarized true utility from with_tool_desc hidden states
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .labels import DEFAULT_EPS, DEFAULT_NEED_THRESHOLD, need_labels, positive_utility_labels
from .mlp import (
    MlpModel,
    MlpSpec,
    Standardizer,
    fit_standardizer,
    predict_proba_matrix,
    train_mlp,
)
from .traces import EmbeddingStore, TraceSet

BUNDLE_MAGIC = b"ESB1"
BUNDLE_VERSION = 1

ESTIMATOR_KINDS = ("LNE", "LUE_x", "LUE_xd")
KIND_CONDITION = {"LNE": "no_tool_input", "LUE_x": "no_tool_input",
                  "LUE_xd": "with_tool_desc"}


class BundleFormatError(Exception):
    """A serialized bundle is corrupt or from an unsupported version."""


def labels_for_kind(ts: TraceSet, kind: str,
                    need_threshold: float = DEFAULT_NEED_THRESHOLD,
                    eps: float = DEFAULT_EPS) -> np.ndarray:
    """LNE targets true need; both LUE variants target 1{utility == +1}."""
    if kind == "LNE":
        return need_labels(ts, need_threshold)
    if kind in ("LUE_x", "LUE_xd"):
        return positive_utility_labels(ts, eps)
    raise ValueError(f"unknown estimator kind {kind!r}")


# ---------------------------------------------------------------------------
# Stratified folds
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    """Disjoint, covering test-index arrays; one per fold."""

    test_indices: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.test_indices)

    def splits(self, n: int):
        """Yield (train_idx, test_idx) pairs."""
        all_idx = np.arange(n)
        for test in self.test_indices:
            mask = np.ones(n, dtype=bool)
            mask[test] = False
            yield all_idx[mask], test


def stratified_folds(y: np.ndarray, k: int = 5, seed: int = 42) -> FoldPlan:
    """Partition indices into k folds preserving the class distribution.

    Per-fold class counts stay within one instance of the proportional
    share; requires every class to have at least k members.
    """
    y = np.asarray(y, dtype=np.int64).ravel()
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    chunks: list[list[np.ndarray]] = [[] for _ in range(k)]
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.shape[0] < k:
            raise ValueError(f"class {cls} has {idx.shape[0]} members, needs >= {k}")
        idx = idx[rng.permutation(idx.shape[0])]
        for f, part in enumerate(np.array_split(idx, k)):
            chunks[f].append(part)
    return FoldPlan(test_indices=[np.sort(np.concatenate(parts)) for parts in chunks])


# ---------------------------------------------------------------------------
# Cross-validation with out-of-fold predictions
# ---------------------------------------------------------------------------

@dataclass
class FoldMetrics:
    fold: int
    accuracy: float
    n_test: int
    spec: MlpSpec | None = None  # winning spec when grids re-run per fold


@dataclass
class CvResult:
    """Out-of-fold predictions plus aggregate metrics.

    Every instance receives exactly one out-of-fold prediction.
    """

    oof_proba: np.ndarray
    oof_label: np.ndarray
    accuracy: float
    balanced_accuracy: float
    confusion: np.ndarray  # 2x2, rows true, cols predicted
    fold_metrics: list[FoldMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "confusion": self.confusion.tolist(),
            "n": int(self.oof_label.shape[0]),
            "folds": [
                {"fold": fm.fold, "accuracy": fm.accuracy, "n_test": fm.n_test,
                 "spec": fm.spec.to_json_obj() if fm.spec is not None else None}
                for fm in self.fold_metrics
            ],
        }


def _binary_metrics(y: np.ndarray, pred: np.ndarray) -> tuple[float, float, np.ndarray]:
    confusion = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(y, pred):
        confusion[int(t), int(p)] += 1
    accuracy = float(np.trace(confusion)) / y.shape[0]
    recalls = []
    for cls in (0, 1):
        total = int(confusion[cls].sum())
        if total:
            recalls.append(confusion[cls, cls] / total)
    balanced = float(np.mean(recalls)) if recalls else float("nan")
    return accuracy, balanced, confusion


def cross_val_oof(x: np.ndarray, y: np.ndarray, spec: MlpSpec, k: int = 5,
                  seed: int = 42) -> CvResult:
    """Out-of-fold evaluation of a fixed spec.

    Each fold standardizes on its own training split, trains, and predicts
    the held-out fold; the assembled predictions cover every instance once.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    plan = stratified_folds(y, k=k, seed=seed)
    oof = np.full(y.shape[0], np.nan)
    fold_metrics = []
    for f, (train_idx, test_idx) in enumerate(plan.splits(y.shape[0])):
        st = fit_standardizer(x[train_idx])
        model = train_mlp(st.apply(x[train_idx]), y[train_idx], spec)
        proba = predict_proba_matrix(model, st, x[test_idx])
        oof[test_idx] = proba
        fold_acc = float(np.mean((proba >= 0.5) == (y[test_idx] == 1)))
        fold_metrics.append(FoldMetrics(fold=f, accuracy=fold_acc,
                                        n_test=int(test_idx.shape[0])))
    assert not np.isnan(oof).any()
    labels = (oof >= 0.5).astype(np.int64)
    accuracy, balanced, confusion = _binary_metrics(y, labels)
    return CvResult(oof_proba=oof, oof_label=labels, accuracy=accuracy,
                    balanced_accuracy=balanced, confusion=confusion,
                    fold_metrics=fold_metrics)


def grid_search(x: np.ndarray, y: np.ndarray, grid: Sequence[MlpSpec],
                seed: int = 42, k: int = 5) -> MlpSpec:
    """Pick the spec with the best mean inner-k-fold validation accuracy on
    the given training data; ties go to grid declaration order."""
    if not grid:
        raise ValueError("grid must be non-empty")
    if len(grid) == 1:
        return grid[0]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    plan = stratified_folds(y, k=k, seed=seed)
    best_spec, best_score = grid[0], -np.inf
    for spec in grid:
        scores = []
        for train_idx, test_idx in plan.splits(y.shape[0]):
            st = fit_standardizer(x[train_idx])
            model = train_mlp(st.apply(x[train_idx]), y[train_idx], spec)
            proba = predict_proba_matrix(model, st, x[test_idx])
            scores.append(float(np.mean((proba >= 0.5) == (y[test_idx] == 1))))
        score = float(np.mean(scores))
        if score > best_score:
            best_spec, best_score = spec, score
    return best_spec


def nested_cross_val_oof(x: np.ndarray, y: np.ndarray, grid: Sequence[MlpSpec],
                         k: int = 5, seed: int = 42) -> CvResult:
    """Leakage-free grid evaluation: the grid search re-runs inside every
    outer training split, and the per-fold winning spec is recorded."""
    if not grid:
        raise ValueError("grid must be non-empty")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    plan = stratified_folds(y, k=k, seed=seed)
    oof = np.full(y.shape[0], np.nan)
    fold_metrics = []
    for f, (train_idx, test_idx) in enumerate(plan.splits(y.shape[0])):
        spec = grid_search(x[train_idx], y[train_idx], grid, seed=seed, k=k)
        st = fit_standardizer(x[train_idx])
        model = train_mlp(st.apply(x[train_idx]), y[train_idx], spec)
        proba = predict_proba_matrix(model, st, x[test_idx])
        oof[test_idx] = proba
        fold_acc = float(np.mean((proba >= 0.5) == (y[test_idx] == 1)))
        fold_metrics.append(FoldMetrics(fold=f, accuracy=fold_acc,
                                        n_test=int(test_idx.shape[0]), spec=spec))
    assert not np.isnan(oof).any()
    labels = (oof >= 0.5).astype(np.int64)
    accuracy, balanced, confusion = _binary_metrics(y, labels)
    return CvResult(oof_proba=oof, oof_label=labels, accuracy=accuracy,
                    balanced_accuracy=balanced, confusion=confusion,
                    fold_metrics=fold_metrics)


# ---------------------------------------------------------------------------
# Layer search
# ---------------------------------------------------------------------------

@dataclass
class LayerScore:
    layer: int
    accuracy: float
    spec: MlpSpec


@dataclass
class LayerSearchResult:
    best_layer: int
    table: list[LayerScore]


def layer_search(layer_matrices: Mapping[int, np.ndarray], y: np.ndarray,
                 grid: Sequence[MlpSpec], k: int = 5, seed: int = 42
                 ) -> LayerSearchResult:
    """Score every layer by its best out-of-fold accuracy across the grid;
    the winning layer is the argmax, ties resolved to the lowest index."""
    if not layer_matrices:
        raise ValueError("need at least one layer matrix")
    if not grid:
        raise ValueError("grid must be non-empty")
    y = np.asarray(y, dtype=np.int64).ravel()
    row_counts = {layer: np.asarray(m).shape[0] for layer, m in layer_matrices.items()}
    if len(set(row_counts.values())) != 1:
        raise ValueError(f"inconsistent row counts across layers: {row_counts}")
    if next(iter(row_counts.values())) != y.shape[0]:
        raise ValueError("layer row count does not match label count")

    table = []
    for layer in sorted(layer_matrices):
        best_acc, best_spec = -np.inf, grid[0]
        for spec in grid:
            result = cross_val_oof(np.asarray(layer_matrices[layer]), y, spec,
                                   k=k, seed=seed)
            if result.accuracy > best_acc:
                best_acc, best_spec = result.accuracy, spec
        table.append(LayerScore(layer=layer, accuracy=best_acc, spec=best_spec))
    best = max(table, key=lambda e: (e.accuracy, -e.layer))
    return LayerSearchResult(best_layer=best.layer, table=table)


# ---------------------------------------------------------------------------
# Estimator bundle
# ---------------------------------------------------------------------------

@dataclass
class EstimatorBundle:
    """Deployable package: standardizer + network + metadata."""

    kind: str
    layer: int
    standardizer: Standardizer
    model: MlpModel
    cv_summary: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    @property
    def condition(self) -> str:
        return KIND_CONDITION[self.kind]

    @property
    def dim(self) -> int:
        return self.model.input_dim

    def predict_proba(self, x: np.ndarray) -> float:
        from .mlp import predict_proba
        return predict_proba(self.model, self.standardizer, np.asarray(x, dtype=np.float64))

    def predict_proba_matrix(self, x: np.ndarray) -> np.ndarray:
        return predict_proba_matrix(self.model, self.standardizer, x)


def bundle_probabilities(bundle: EstimatorBundle, ts: TraceSet,
                         store: EmbeddingStore) -> np.ndarray:
    """Predicted probabilities for every record, in record order."""
    x = store.matrix_for(ts, bundle.condition, bundle.layer)
    return bundle.predict_proba_matrix(x)


def save_bundle(bundle: EstimatorBundle, path: str | Path) -> None:
    """Versioned binary format: JSON header + float64 array payloads.

    Deterministic bytes for a given bundle, so fixed seeds give
    byte-identical files.
    """
    arrays: list[tuple[str, np.ndarray]] = [
        ("scaler_mean", bundle.standardizer.mean),
        ("scaler_scale", bundle.standardizer.scale),
    ]
    for i, (w, b) in enumerate(zip(bundle.model.weights, bundle.model.biases)):
        arrays.append((f"w{i}", w))
        arrays.append((f"b{i}", b))
    header = {
        "version": BUNDLE_VERSION,
        "kind": bundle.kind,
        "layer": bundle.layer,
        "dim": bundle.dim,
        "dtype": "f64",
        "spec": bundle.model.spec.to_json_obj(),
        "training": {"epochs_run": bundle.model.epochs_run,
                     "stopped_early": bundle.model.stopped_early},
        "metrics": bundle.cv_summary,
        "provenance": bundle.provenance,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_bundle(path: str | Path) -> EstimatorBundle:
    """Inverse of save_bundle; bit-exact round trip."""
    with Path(path).open("rb") as fh:
        magic = fh.read(4)
        if magic != BUNDLE_MAGIC:
            raise BundleFormatError(f"bad magic {magic!r}, expected {BUNDLE_MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise BundleFormatError("truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise BundleFormatError("truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BundleFormatError(f"invalid header JSON: {exc}") from exc
        if header.get("version") != BUNDLE_VERSION:
            raise BundleFormatError(f"unsupported bundle version {header.get('version')!r}")
        payload = fh.read()

    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise BundleFormatError(f"truncated payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise BundleFormatError(f"{len(payload) - offset} trailing payload bytes")

    spec = MlpSpec.from_json_obj(header["spec"])
    n_layers = sum(1 for name in arrays if name.startswith("w"))
    weights = [arrays[f"w{i}"] for i in range(n_layers)]
    biases = [arrays[f"b{i}"] for i in range(n_layers)]
    model = MlpModel(weights=weights, biases=biases, spec=spec,
                     epochs_run=header["training"]["epochs_run"],
                     stopped_early=header["training"]["stopped_early"])
    st = Standardizer(mean=arrays["scaler_mean"], scale=arrays["scaler_scale"])
    return EstimatorBundle(kind=header["kind"], layer=header["layer"],
                           standardizer=st, model=model,
                           cv_summary=header["metrics"],
                           provenance=header.get("provenance", {}))


def fit_bundle(ts: TraceSet, store: EmbeddingStore, kind: str,
               grid: Sequence[MlpSpec], layer: int | str = "auto",
               k: int = 5, seed: int = 42,
               need_threshold: float = DEFAULT_NEED_THRESHOLD,
               eps: float = DEFAULT_EPS
               ) -> tuple[EstimatorBundle, LayerSearchResult | None]:
    """Full training pipeline for one estimator kind.

    With layer='auto' the representation layer is chosen by layer search;
    out-of-fold metrics for the chosen layer re-run the grid per outer fold,
    and the deployed model is refit on all data with the globally best spec.
    """
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    y = labels_for_kind(ts, kind, need_threshold, eps)
    condition = KIND_CONDITION[kind]

    search: LayerSearchResult | None = None
    if layer == "auto":
        candidates = store.layers(condition)
        if not candidates:
            raise ValueError(f"no embedding layers available for condition {condition!r}")
        matrices = {idx: store.matrix_for(ts, condition, idx) for idx in candidates}
        search = layer_search(matrices, y, grid, k=k, seed=seed)
        chosen = search.best_layer
    else:
        chosen = int(layer)

    x = store.matrix_for(ts, condition, chosen)
    if len(grid) > 1:
        cv = nested_cross_val_oof(x, y, grid, k=k, seed=seed)
        final_spec = grid_search(x, y, grid, seed=seed, k=k)
    else:
        cv = cross_val_oof(x, y, grid[0], k=k, seed=seed)
        final_spec = grid[0]

    st = fit_standardizer(x)
    model = train_mlp(st.apply(x), y, final_spec)
    bundle = EstimatorBundle(
        kind=kind, layer=chosen, standardizer=st, model=model,
        cv_summary=cv.summary(),
        provenance={"n": len(ts), "condition": condition, "seed": seed},
    )
    return bundle, search
