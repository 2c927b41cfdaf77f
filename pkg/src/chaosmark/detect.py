"""Detecting which model produced an activation: features + logistic regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseNet, TrainingDivergedError, layer_activations, predict
from .tensor_store import atomic_write_text

L2_PENALTY = 1e-4


class ZeroRetentionError(ValueError):
    """Confidence filtering discarded every row."""


@dataclass
class ActivationFeatures:
    """Confidence-filtered activation rows from a single model."""

    rows: np.ndarray
    kept: int
    discarded: int
    threshold: float


@dataclass
class ActivationFeatureSet:
    """Labeled rows from several models, balanced to the smallest class."""

    features: np.ndarray
    labels: np.ndarray
    threshold: float
    kept_counts: list[int]
    discarded_counts: list[int]


def collect_features(net: DenseNet, inputs, layer: str,
                     threshold: float) -> ActivationFeatures:
    """Keep activation rows where the net's top class probability passes.

    Low-confidence rows say more about the input than about the model, so
    they are dropped and only counted.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    inputs = np.asarray(inputs, dtype=np.float64)
    confidence = predict(net, inputs).max(axis=1)
    mask = confidence >= threshold
    kept = int(mask.sum())
    if kept == 0:
        raise ZeroRetentionError(
            f"threshold {threshold} discarded all {inputs.shape[0]} rows"
        )
    rows = layer_activations(net, inputs, layer)[mask]
    return ActivationFeatures(
        rows=rows, kept=kept, discarded=int(inputs.shape[0] - kept), threshold=threshold
    )


def collect_feature_set(nets: list[DenseNet], inputs, layer: str,
                        threshold: float) -> ActivationFeatureSet:
    """Label rows by source model (list order) and truncate to the smallest.

    Balancing keeps the classifier from scoring well by majority vote alone.
    """
    if len(nets) < 2:
        raise ValueError("need at least two models to tell apart")
    collected = [collect_features(net, inputs, layer, threshold) for net in nets]
    smallest = min(item.kept for item in collected)
    features = np.vstack([item.rows[:smallest] for item in collected])
    labels = np.repeat(np.arange(len(nets)), smallest)
    return ActivationFeatureSet(
        features=features,
        labels=labels,
        threshold=threshold,
        kept_counts=[item.kept for item in collected],
        discarded_counts=[item.discarded for item in collected],
    )


@dataclass
class LogRegModel:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)
    loss_trace: list[float]
    # standardization learned from the training rows, replayed at classify time
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None


def logreg_loss_and_grad(weights: np.ndarray, bias: np.ndarray,
                         features: np.ndarray, labels: np.ndarray,
                         l2: float = L2_PENALTY):
    """Multinomial cross-entropy with an L2 penalty on the weight matrix."""
    scores = features @ weights.T + bias
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    probabilities = exp / exp.sum(axis=1, keepdims=True)
    n = features.shape[0]
    tiny = np.finfo(np.float64).tiny
    picked = probabilities[np.arange(n), labels]
    loss = float(-np.mean(np.log(picked + tiny))) + 0.5 * l2 * float(
        np.sum(weights**2)
    )
    residual = probabilities.copy()
    residual[np.arange(n), labels] -= 1.0
    residual /= n
    d_weights = residual.T @ features + l2 * weights
    d_bias = residual.sum(axis=0)
    return loss, d_weights, d_bias


def train_logreg(feature_set: ActivationFeatureSet, learning_rate: float = 1.0,
                 epochs: int = 500, l2: float = L2_PENALTY) -> LogRegModel:
    """Full-batch gradient descent from zero weights; deterministic.

    Features are standardized per column first. The separating signal between
    sibling models lives along low-variance directions of the activation
    cloud, and raw gradient descent barely moves there; the scaler is stored
    on the model and replayed by classify.
    """
    features = np.asarray(feature_set.features, dtype=np.float64)
    labels = np.asarray(feature_set.labels, dtype=np.int64)
    if features.ndim != 2 or labels.ndim != 1 or labels.size != features.shape[0]:
        raise ValueError("features must be (n, f) with one label per row")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("training needs at least two distinct labels")
    if learning_rate <= 0 or epochs < 1:
        raise ValueError("learning_rate must be positive and epochs at least 1")
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0  # constant columns carry no signal; leave centered
    features = (features - mean) / scale
    class_count = int(labels.max()) + 1
    weights = np.zeros((class_count, features.shape[1]))
    bias = np.zeros(class_count)
    trace = []
    for _ in range(epochs):
        loss, d_weights, d_bias = logreg_loss_and_grad(weights, bias, features, labels, l2)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite logistic loss: {loss!r}")
        weights -= learning_rate * d_weights
        bias -= learning_rate * d_bias
        trace.append(loss)
    return LogRegModel(weights=weights, bias=bias, loss_trace=trace,
                       feature_mean=mean, feature_scale=scale)


def classify(model: LogRegModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and class probabilities (ties to the lowest label)."""
    features = np.asarray(features, dtype=np.float64)
    if model.feature_mean is not None:
        features = (features - model.feature_mean) / model.feature_scale
    scores = features @ model.weights.T + model.bias
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    probabilities = exp / exp.sum(axis=1, keepdims=True)
    return np.argmax(probabilities, axis=1), probabilities


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true label, columns: predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)


def confusion(true_labels, predicted_labels, class_count: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise ValueError("label vectors must be the same length")
    if true_labels.size == 0:
        raise ValueError("cannot build a confusion matrix from zero labels")
    everything = np.concatenate([true_labels, predicted_labels])
    if everything.min() < 0 or everything.max() >= class_count:
        raise ValueError(f"labels must lie in [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        counts[t, p] += 1
    return ConfusionMatrix(counts)


def format_confusion(matrix: ConfusionMatrix, names: list[str] | None = None) -> str:
    size = matrix.counts.shape[0]
    names = names or [f"class{i}" for i in range(size)]
    header = "true\\predicted," + ",".join(names)
    lines = [header]
    for i in range(size):
        lines.append(names[i] + "," + ",".join(str(c) for c in matrix.counts[i]))
    lines.append(f"accuracy,{matrix.accuracy!r}")
    return "\n".join(lines) + "\n"


def save_confusion_csv(matrix: ConfusionMatrix, dest,
                       names: list[str] | None = None) -> None:
    atomic_write_text(dest, format_confusion(matrix, names))
