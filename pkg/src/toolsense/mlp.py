"""From-scratch binary MLP: z-score standardization, rectified-linear hidden
layers, logistic output, cross-entropy + L2 loss, adaptive-moment gradient
descent, and early stopping on a held-out validation split.

Everything is deterministic given the seed: the validation split, the
weight initialization, and the per-epoch shuffles all draw from one
seeded generator in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Standardizer:
    """Per-feature affine transform to zero mean / unit variance on the fit
    data; zero-variance features keep scale 1 and map to zero."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"dimension mismatch: {x.shape[-1]} != {self.mean.shape[0]}")
        return (x - self.mean) / self.scale


def fit_standardizer(x: np.ndarray) -> Standardizer:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an n x d matrix with n >= 2, got shape {x.shape}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    return Standardizer(mean=mean, scale=scale)


@dataclass(frozen=True)
class MlpSpec:
    """Frozen training contract: architecture plus every optimizer knob."""

    hidden_layers: tuple[int, ...] = (128,)
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 5
    seed: int = 42
    l2_penalty: float = 1e-4
    batch_size: int | None = None  # None means min(200, n_train)
    validation_fraction: float = 0.1
    improvement_tolerance: float = 1e-4

    def __post_init__(self):
        if any(w <= 0 for w in self.hidden_layers):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_layers}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def effective_batch_size(self, n: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n)
        return min(200, n)

    def to_json_obj(self) -> dict:
        return {
            "hidden_layers": list(self.hidden_layers),
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "l2_penalty": self.l2_penalty,
            "batch_size": self.batch_size,
            "validation_fraction": self.validation_fraction,
            "improvement_tolerance": self.improvement_tolerance,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MlpSpec":
        return cls(
            hidden_layers=tuple(obj["hidden_layers"]),
            learning_rate=obj["learning_rate"],
            max_epochs=obj["max_epochs"],
            patience=obj["patience"],
            seed=obj["seed"],
            l2_penalty=obj["l2_penalty"],
            batch_size=obj["batch_size"],
            validation_fraction=obj["validation_fraction"],
            improvement_tolerance=obj["improvement_tolerance"],
        )


DEFAULT_GRID: tuple[MlpSpec, ...] = tuple(
    MlpSpec(hidden_layers=arch, learning_rate=lr)
    for arch in ((), (128,), (256,), (128, 64), (1024, 64))
    for lr in (1e-3, 1e-4)
)

SMALL_GRID: tuple[MlpSpec, ...] = (MlpSpec(hidden_layers=(128,), learning_rate=1e-3),)


@dataclass
class MlpModel:
    """Trained network: weight matrices (fan_in x fan_out) and bias vectors
    chaining input -> hidden... -> 1, plus training metadata."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    spec: MlpSpec
    epochs_run: int = 0
    stopped_early: bool = False

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])


def init_params(dims: Sequence[int], rng: np.random.Generator
                ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Uniform +/- sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(weights: list[np.ndarray], biases: list[np.ndarray],
            x: np.ndarray) -> np.ndarray:
    """Probabilities in (0,1) for an (n, d) batch."""
    a = np.asarray(x, dtype=np.float64)
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    z = (a @ weights[-1] + biases[-1]).ravel()
    p = _sigmoid(z)
    return np.clip(p, 1e-15, 1.0 - 1e-15)


def loss_and_grad(weights: list[np.ndarray], biases: list[np.ndarray],
                  x: np.ndarray, y: np.ndarray, l2_penalty: float
                  ) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean cross-entropy over the batch plus 0.5 * l2 * sum ||W||^2 / n,
    with its analytic gradients (exposed for finite-difference checks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]

    activations = [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        activations.append(a)
    z = (a @ weights[-1] + biases[-1]).ravel()

    # softplus(z) - y z is the stable form of -log p(y | z)
    bce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    reg = 0.5 * l2_penalty * sum(float(np.sum(w * w)) for w in weights) / n
    loss = bce + reg

    grad_w = [np.empty_like(w) for w in weights]
    grad_b = [np.empty_like(b) for b in biases]
    delta = ((_sigmoid(z) - y) / n)[:, None]
    for layer in range(len(weights) - 1, -1, -1):
        grad_w[layer] = activations[layer].T @ delta + (l2_penalty / n) * weights[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer].T) * (activations[layer] > 0.0)
    return loss, grad_w, grad_b


def _stratified_holdout(y: np.ndarray, fraction: float, rng: np.random.Generator
                        ) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, val_idx); at least one training sample per class is kept,
    a class with a single sample contributes nothing to validation."""
    if fraction <= 0.0:
        return np.arange(y.shape[0]), np.array([], dtype=int)
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.shape[0])]
        n_val = min(idx.shape[0] - 1, max(1, round(fraction * idx.shape[0])))
        n_val = max(n_val, 0)
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


def train_mlp(x: np.ndarray, y: np.ndarray, spec: MlpSpec,
              seed: int | None = None) -> MlpModel:
    """Fit the network with Adam and early stopping.

    Training stops at max_epochs, or when the held-out validation accuracy
    fails to improve by improvement_tolerance for patience consecutive
    epochs. Single-class targets are rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}")
    classes = np.unique(y)
    if not np.array_equal(classes, np.array([0, 1])):
        raise ValueError(f"need both binary classes present, got {classes.tolist()}")

    rng = np.random.default_rng(spec.seed if seed is None else seed)
    train_idx, val_idx = _stratified_holdout(y, spec.validation_fraction, rng)
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    use_early_stop = val_idx.shape[0] > 0 and np.unique(y_train).shape[0] == 2
    if not use_early_stop:
        x_train, y_train = x, y

    dims = [x.shape[1], *spec.hidden_layers, 1]
    weights, biases = init_params(dims, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]

    n_train = x_train.shape[0]
    batch = spec.effective_batch_size(n_train)
    best_score = -np.inf
    no_improve = 0
    step = 0
    epochs_run = 0
    stopped_early = False

    for epoch in range(spec.max_epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            sel = perm[start:start + batch]
            _, grad_w, grad_b = loss_and_grad(weights, biases, x_train[sel],
                                              y_train[sel], spec.l2_penalty)
            step += 1
            corr1 = 1.0 - ADAM_BETA1 ** step
            corr2 = 1.0 - ADAM_BETA2 ** step
            for params, grads, ms, vs in ((weights, grad_w, m_w, v_w),
                                          (biases, grad_b, m_b, v_b)):
                for p, g, m, v in zip(params, grads, ms, vs):
                    m *= ADAM_BETA1
                    m += (1.0 - ADAM_BETA1) * g
                    v *= ADAM_BETA2
                    v += (1.0 - ADAM_BETA2) * g * g
                    p -= spec.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)
        epochs_run = epoch + 1
        if not use_early_stop:
            continue
        score = float(np.mean((forward(weights, biases, x_val) >= 0.5) == (y_val == 1)))
        if score > best_score + spec.improvement_tolerance:
            no_improve = 0
        else:
            no_improve += 1
        if score > best_score:
            best_score = score
        if no_improve >= spec.patience:
            stopped_early = True
            break

    return MlpModel(weights=weights, biases=biases, spec=spec,
                    epochs_run=epochs_run, stopped_early=stopped_early)


def predict_proba(model: MlpModel, st: Standardizer | None, x: np.ndarray) -> float:
    """Probability of the positive class for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {x.shape}")
    if x.shape[0] != model.input_dim:
        raise ValueError(f"dimension mismatch: {x.shape[0]} != {model.input_dim}")
    row = x[None, :]
    if st is not None:
        row = st.apply(row)
    return float(forward(model.weights, model.biases, row)[0])


def predict_proba_matrix(model: MlpModel, st: Standardizer | None,
                         x: np.ndarray) -> np.ndarray:
    """Probabilities for an (n, d) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected (n, {model.input_dim}) matrix, got {x.shape}")
    if st is not None:
        x = st.apply(x)
    return forward(model.weights, model.biases, x)


def clone_spec_with_seed(spec: MlpSpec, seed: int) -> MlpSpec:
    return replace(spec, seed=seed)
