"""Per-layer dataset classification from prefill expert activations.

Multinomial logistic regression trained by full-batch gradient descent on the
raw per-expert token counts of each request.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .trace import ActivationMatrix, ActivationRecord, PREFILL, build_activation_matrix


class SplitError(ValueError):
    pass


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class TrainParams:
    learning_rate: float = 0.1
    l2_penalty: float = 1e-4
    epochs: int = 500
    scale_features: bool = False
    seed: int = 0


@dataclass(frozen=True)
class SoftmaxModel:
    weights: np.ndarray  # [C, E]
    biases: np.ndarray  # [C]
    class_labels: list[str]
    feature_scale: np.ndarray | None = None
    loss_history: tuple[float, ...] = ()

    def _features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X if self.feature_scale is None else X / self.feature_scale

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self._features(X) @ self.weights.T + self.biases)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(matrix: ActivationMatrix, spec: SplitSpec) -> tuple[ActivationMatrix, ActivationMatrix]:
    """Split rows so each dataset keeps ``train_fraction`` of its rows (to the nearest row)."""
    rng = np.random.default_rng(spec.seed)
    labels = np.asarray(matrix.row_labels)
    train_idx, test_idx = [], []
    groups = [np.flatnonzero(labels == lab) for lab in matrix.labels()] if spec.stratified \
        else [np.arange(matrix.num_rows)]
    for rows in groups:
        if rows.size < 2:
            raise SplitError(f"class {labels[rows[0]]!r} has fewer than 2 samples")
        n_train = min(max(_round_half_up(spec.train_fraction * rows.size), 1), rows.size - 1)
        perm = rng.permutation(rows)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return matrix.subset(train), matrix.subset(test)


def loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float):
    """Mean cross-entropy plus ``l2/2 * ||W||^2``, and its gradients w.r.t. W and b.

    Y is one-hot, shape [n, C].
    """
    n = X.shape[0]
    z = X @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -float((Y * log_p).sum()) / n + 0.5 * l2 * float((W * W).sum())
    diff = (np.exp(log_p) - Y) / n
    return loss, diff.T @ X + l2 * W, diff.sum(axis=0)


def train_softmax(X, labels, learning_rate: float = 0.1, l2_penalty: float = 1e-4, epochs: int = 500,
                  seed: int = 0, scale_features: bool = False, class_labels: list[str] | None = None) -> SoftmaxModel:
    """Fit a multinomial logistic regression from a zero initialization.

    Gradient descent halves the step size whenever a step would raise the
    loss, so the recorded loss sequence never increases. *seed* is accepted
    for interface symmetry; training is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    classes = class_labels or list(dict.fromkeys(labels))
    if len(set(labels)) < 2:
        raise TrainingError("training data contains fewer than two classes")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[lab] for lab in labels])
    C = len(classes)
    scale = None
    if scale_features:
        scale = X.max(axis=0)
        scale[scale == 0] = 1.0
        X = X / scale
    Y = np.zeros((X.shape[0], C))
    Y[np.arange(X.shape[0]), y] = 1.0
    W = np.zeros((C, X.shape[1]))
    b = np.zeros(C)
    lr = learning_rate
    loss, gW, gb = loss_and_grad(W, b, X, Y, l2_penalty)
    history = [loss]
    for _ in range(epochs):
        for _ in range(60):
            W_new, b_new = W - lr * gW, b - lr * gb
            new_loss, new_gW, new_gb = loss_and_grad(W_new, b_new, X, Y, l2_penalty)
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            break  # no descent step found; at a (numerical) minimum
        W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
        history.append(loss)
    return SoftmaxModel(W, b, classes, scale, tuple(history))


def evaluate_accuracy(model: SoftmaxModel, X, labels) -> float:
    labels = list(labels)
    if not labels:
        raise ValueError("empty test set")
    index = {c: i for i, c in enumerate(model.class_labels)}
    y = np.array([index.get(lab, -1) for lab in labels])
    return float(np.mean(model.predict(X) == y))


@dataclass(frozen=True)
class LayerAccuracy:
    layer: int
    accuracy: float | None
    n_train: int
    n_test: int
    error: str = ""


def _classify_layer(records, layer, num_experts, split, params) -> LayerAccuracy:
    try:
        matrix = build_activation_matrix(records, layer, PREFILL, num_experts)
        train, test = stratified_split(matrix, split)
        model = train_softmax(train.values, train.row_labels, params.learning_rate, params.l2_penalty,
                              params.epochs, params.seed, params.scale_features, class_labels=matrix.labels())
        return LayerAccuracy(layer, evaluate_accuracy(model, test.values, test.row_labels),
                             train.num_rows, test.num_rows)
    except (SplitError, TrainingError, ValueError) as exc:
        return LayerAccuracy(layer, None, 0, 0, str(exc))


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MOE_PLACER_THREADS", "")))
    except ValueError:
        return min(8, os.cpu_count() or 1)


def per_layer_classification_report(records: list[ActivationRecord], num_experts: int, num_layers: int,
                                    split: SplitSpec = SplitSpec(), params: TrainParams = TrainParams()):
    """Accuracy per MoE layer plus (mean, std) over the layers that succeeded."""
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        rows = list(pool.map(lambda l: _classify_layer(records, l, num_experts, split, params), range(num_layers)))
    accs = [r.accuracy for r in rows if r.accuracy is not None]
    mean = float(np.mean(accs)) if accs else math.nan
    std = float(np.std(accs)) if accs else math.nan
    return rows, mean, std
