"""Desk-scale dense network: training, attack protocol, metrics, datasets.

Everything here runs on numpy float64 so gradient checks and byte-level
reproducibility hold. Sizes are meant for experiments that finish in
seconds, not for real workloads.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_store import (
    FormatError,
    ModelWeights,
    TruncatedFileError,
    UnknownLayerError,
    WeightTensor,
    atomic_write_bytes,
    atomic_write_text,
    load_weights,
    save_weights,
)

RELU = "relu"
SOFTMAX = "softmax"
OPTIMIZERS = ("sgd", "adam")


class TrainingDivergedError(RuntimeError):
    """Loss or weights stopped being finite during an update."""


@dataclass
class DenseLayer:
    name: str
    kernel: np.ndarray  # (fan_in, units)
    bias: np.ndarray  # (units,)
    activation: str


@dataclass
class DenseNet:
    input_dim: int
    layers: list[DenseLayer]

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def copy(self) -> "DenseNet":
        return DenseNet(
            self.input_dim,
            [
                DenseLayer(l.name, l.kernel.copy(), l.bias.copy(), l.activation)
                for l in self.layers
            ],
        )


def build_net(input_dim: int, hidden: list[int], classes: int, seed: int = 0) -> DenseNet:
    """Relu hidden stack plus a softmax head, scaled-uniform fan-in init."""
    if input_dim < 1 or classes < 2:
        raise ValueError("need input_dim >= 1 and at least two classes")
    if any(units < 1 for units in hidden):
        raise ValueError(f"hidden layer widths must be positive, got {hidden}")
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, classes]
    layers = []
    for i in range(len(widths) - 1):
        fan_in, units = widths[i], widths[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-limit, limit, size=(fan_in, units))
        activation = SOFTMAX if i == len(widths) - 2 else RELU
        layers.append(DenseLayer(f"dense{i + 1}", kernel, np.zeros(units), activation))
    return DenseNet(input_dim, layers)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward(net: DenseNet, features: np.ndarray) -> list[np.ndarray]:
    """Post-activation output of every layer, input excluded."""
    outputs = []
    current = features
    for layer in net.layers:
        pre = current @ layer.kernel + layer.bias
        if layer.activation == RELU:
            current = np.maximum(pre, 0.0)
        elif layer.activation == SOFTMAX:
            current = _stable_softmax(pre)
        else:
            raise ValueError(f"unknown activation {layer.activation!r}")
        outputs.append(current)
    return outputs


def predict(net: DenseNet, features) -> np.ndarray:
    """Class probabilities, one row per sample; rows sum to 1."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != net.input_dim:
        raise ValueError(
            f"expected features of shape (n, {net.input_dim}), got {features.shape}"
        )
    return _forward(net, features)[-1]


def layer_activations(net: DenseNet, features, layer_name: str) -> np.ndarray:
    """Post-activation rows of one named layer for the given inputs."""
    features = np.asarray(features, dtype=np.float64)
    outputs = _forward(net, features)
    for layer, out in zip(net.layers, outputs):
        if layer.name == layer_name:
            return out
    raise UnknownLayerError(
        f"no layer named {layer_name!r}; have {net.layer_names()}"
    )


def cross_entropy(probabilities: np.ndarray, one_hot: np.ndarray) -> float:
    eps = np.finfo(np.float64).tiny
    return float(-np.mean(np.sum(one_hot * np.log(probabilities + eps), axis=1)))


def loss_and_gradients(net: DenseNet, features: np.ndarray, one_hot: np.ndarray,
                       weight_decay: float = 0.0):
    """Cross-entropy (+ optional L2 on kernels) and its exact gradients.

    Returns (loss, [(d_kernel, d_bias), ...]) in layer order. The same code
    path drives training, so a finite-difference check of this function
    covers the optimizer's inputs.
    """
    outputs = _forward(net, features)
    probabilities = outputs[-1]
    loss = cross_entropy(probabilities, one_hot)
    batch = features.shape[0]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    delta = (probabilities - one_hot) / batch
    for i in range(len(net.layers) - 1, -1, -1):
        previous = features if i == 0 else outputs[i - 1]
        d_kernel = previous.T @ delta
        d_bias = delta.sum(axis=0)
        if weight_decay:
            loss += 0.5 * weight_decay * float(np.sum(net.layers[i].kernel ** 2))
            d_kernel = d_kernel + weight_decay * net.layers[i].kernel
        grads[i] = (d_kernel, d_bias)
        if i > 0:
            delta = (delta @ net.layers[i].kernel.T) * (outputs[i - 1] > 0.0)
    return loss, grads


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    momentum: float = 0.9  # also Adam's first-moment decay
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("momentum coefficients must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1; a zero-epoch run is a no-op")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")


@dataclass
class Dataset:
    """Feature matrix in [0, 1] with one-hot labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ValueError("features and labels must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.shape[1] != self.class_count:
            raise ValueError("labels width must equal class_count")
        if self.features.size and (
            self.features.min() < 0.0 or self.features.max() > 1.0
        ):
            raise ValueError("features must be normalized to [0, 1]")

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    def label_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def one_hot(indices, class_count: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= class_count):
        raise ValueError(f"label indices must lie in [0, {class_count})")
    encoded = np.zeros((indices.size, class_count))
    encoded[np.arange(indices.size), indices] = 1.0
    return encoded


def make_blobs(samples: int, features: int, classes: int, seed: int = 0,
               noise: float = 0.08) -> Dataset:
    """Synthetic Gaussian blobs in the unit cube, shuffled and clipped."""
    if samples < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, features))
    labels = np.arange(samples) % classes
    points = centers[labels] + rng.normal(0.0, noise, size=(samples, features))
    order = rng.permutation(samples)
    points = np.clip(points[order], 0.0, 1.0)
    return Dataset(points, one_hot(labels[order], classes), classes)


def split_dataset(data: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Deterministic order-preserving split: first ceil(fraction*n), then rest."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    cut = int(np.ceil(data.n_samples * fraction))
    first = Dataset(data.features[:cut], data.labels[:cut], data.class_count)
    second = Dataset(data.features[cut:], data.labels[cut:], data.class_count)
    return first, second


def train(net: DenseNet, data: Dataset, config: TrainConfig) -> tuple[DenseNet, list[float]]:
    """Mini-batch training; returns a new net and the per-epoch mean loss."""
    config.validate()
    if data.n_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    params = []
    for layer in net.layers:
        params.append(layer.kernel)
        params.append(layer.bias)
    slots = [np.zeros_like(p) for p in params]  # sgd velocity / adam first moment
    second = [np.zeros_like(p) for p in params]  # adam second moment
    step = 0
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(data.n_samples)
        total = 0.0
        for start in range(0, data.n_samples, config.batch_size):
            picked = order[start : start + config.batch_size]
            loss, grads = loss_and_gradients(
                net, data.features[picked], data.labels[picked], config.weight_decay
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {loss!r}"
                )
            total += loss * picked.size
            flat_grads = [g for pair in grads for g in pair]
            step += 1
            for i, (param, grad) in enumerate(zip(params, flat_grads)):
                if config.optimizer == "sgd":
                    slots[i] *= config.momentum
                    slots[i] -= config.learning_rate * grad
                    param += slots[i]
                else:
                    slots[i] = config.momentum * slots[i] + (1 - config.momentum) * grad
                    second[i] = config.beta2 * second[i] + (1 - config.beta2) * grad**2
                    m_hat = slots[i] / (1 - config.momentum**step)
                    v_hat = second[i] / (1 - config.beta2**step)
                    param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
                if not np.all(np.isfinite(param)):
                    raise TrainingDivergedError(
                        f"non-finite weights at epoch {epoch}, step {step}"
                    )
        trace.append(total / data.n_samples)
    return net, trace


def fine_tune(net: DenseNet, data: Dataset, base_config: TrainConfig,
              epochs: int) -> DenseNet:
    """Continue training with the same optimizer at a tenth of the rate."""
    config = replace(
        base_config,
        learning_rate=base_config.learning_rate / 10.0,
        epochs=epochs,
    )
    tuned, _ = train(net, data, config)
    return tuned


def finetune_attack(net: DenseNet, holdout: Dataset, base_config: TrainConfig,
                    epochs: int) -> tuple[DenseNet, float, float]:
    """Removal attempt: fine-tune on the first half of unseen data.

    The second half is kept back for measurement only. Returns the attacked
    net plus accuracy on the held-back half before and after.
    """
    tuning_half, measure_half = split_dataset(holdout, 0.5)
    accuracy_before = evaluate(net, measure_half).accuracy
    attacked = fine_tune(net, tuning_half, base_config, epochs)
    accuracy_after = evaluate(attacked, measure_half).accuracy
    return attacked, accuracy_before, accuracy_after


# --- evaluation --------------------------------------------------------------


@dataclass
class ClassMetrics:
    accuracy: float
    true_positive: np.ndarray
    false_positive: np.ndarray
    false_negative: np.ndarray
    true_negative: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    zero_support: np.ndarray
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0
    weighted_precision: float = 0.0
    weighted_recall: float = 0.0
    weighted_f1: float = 0.0


def metrics_from_predictions(true_idx, predicted_idx, class_count: int) -> ClassMetrics:
    true_idx = np.asarray(true_idx, dtype=np.int64)
    predicted_idx = np.asarray(predicted_idx, dtype=np.int64)
    if true_idx.shape != predicted_idx.shape or true_idx.ndim != 1:
        raise ValueError("prediction and truth vectors must be 1-D and equal length")
    if true_idx.size == 0:
        raise ValueError("cannot score an empty prediction set")
    n = true_idx.size
    tp = np.zeros(class_count)
    fp = np.zeros(class_count)
    fn = np.zeros(class_count)
    support = np.zeros(class_count)
    for cls in range(class_count):
        tp[cls] = np.sum((predicted_idx == cls) & (true_idx == cls))
        fp[cls] = np.sum((predicted_idx == cls) & (true_idx != cls))
        fn[cls] = np.sum((predicted_idx != cls) & (true_idx == cls))
        support[cls] = np.sum(true_idx == cls)
    tn = n - tp - fp - fn
    # zero denominators score 0 and are flagged instead of raising
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f1 = np.where(
            precision + recall > 0,
            2 * precision * recall / np.maximum(precision + recall, 1e-300),
            0.0,
        )
    zero_support = support == 0
    present = ~zero_support
    weights = support[present] / support[present].sum()
    return ClassMetrics(
        accuracy=float(np.mean(true_idx == predicted_idx)),
        true_positive=tp,
        false_positive=fp,
        false_negative=fn,
        true_negative=tn,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        zero_support=zero_support,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float(np.sum(precision[present] * weights)),
        weighted_recall=float(np.sum(recall[present] * weights)),
        weighted_f1=float(np.sum(f1[present] * weights)),
    )


def evaluate(net: DenseNet, data: Dataset) -> ClassMetrics:
    predicted = np.argmax(predict(net, data.features), axis=1)
    return metrics_from_predictions(data.label_indices(), predicted, data.class_count)


def format_metrics(metrics: ClassMetrics) -> str:
    lines = [
        f"accuracy: {metrics.accuracy!r}",
        "class,precision,recall,f1,support",
    ]
    for cls in range(metrics.precision.size):
        flag = " (no support)" if metrics.zero_support[cls] else ""
        lines.append(
            f"{cls},{metrics.precision[cls]:.6f},{metrics.recall[cls]:.6f},"
            f"{metrics.f1[cls]:.6f},{int(metrics.support[cls])}{flag}"
        )
    lines.append(
        f"macro: precision {metrics.macro_precision:.6f} recall "
        f"{metrics.macro_recall:.6f} f1 {metrics.macro_f1:.6f}"
    )
    lines.append(
        f"weighted: precision {metrics.weighted_precision:.6f} recall "
        f"{metrics.weighted_recall:.6f} f1 {metrics.weighted_f1:.6f}"
    )
    return "\n".join(lines) + "\n"


def save_metrics_csv(metrics: ClassMetrics, dest) -> None:
    lines = ["class,precision,recall,f1,support,tp,fp,fn,tn"]
    for cls in range(metrics.precision.size):
        lines.append(
            f"{cls},{float(metrics.precision[cls])!r},{float(metrics.recall[cls])!r},"
            f"{float(metrics.f1[cls])!r},{int(metrics.support[cls])},"
            f"{int(metrics.true_positive[cls])},{int(metrics.false_positive[cls])},"
            f"{int(metrics.false_negative[cls])},{int(metrics.true_negative[cls])}"
        )
    lines.append(f"accuracy,{metrics.accuracy!r},,,,,,,")
    atomic_write_text(dest, "\n".join(lines) + "\n")


# --- model persistence --------------------------------------------------------


def net_to_weights(net: DenseNet) -> ModelWeights:
    tensors = []
    for layer in net.layers:
        tensors.append(WeightTensor(f"{layer.name}/kernel", layer.kernel))
        tensors.append(WeightTensor(f"{layer.name}/bias", layer.bias))
    return ModelWeights(tensors)


def net_from_weights(weights: ModelWeights, input_dim: int,
                     layer_specs: list[tuple[str, str]]) -> DenseNet:
    layers = []
    for name, activation in layer_specs:
        kernel = weights.layer(f"{name}/kernel").data.astype(np.float64)
        bias = weights.layer(f"{name}/bias").data.astype(np.float64)
        if kernel.ndim != 2 or bias.ndim != 1 or kernel.shape[1] != bias.shape[0]:
            raise FormatError(f"layer {name!r}: kernel/bias shapes disagree")
        layers.append(DenseLayer(name, kernel, bias, activation))
    net = DenseNet(input_dim, layers)
    if net.layers[0].kernel.shape[0] != input_dim:
        raise FormatError("first kernel does not match the declared input width")
    return net


def save_model(net: DenseNet, path, train_config: TrainConfig | None = None) -> None:
    """Weights as a CWMT container plus a sidecar architecture descriptor."""
    save_weights(net_to_weights(net), path)
    descriptor = {
        "input_dim": net.input_dim,
        "layers": [
            {"name": l.name, "units": int(l.kernel.shape[1]), "activation": l.activation}
            for l in net.layers
        ],
    }
    if train_config is not None:
        descriptor["train"] = {
            "optimizer": train_config.optimizer,
            "learning_rate": train_config.learning_rate,
            "momentum": train_config.momentum,
            "beta2": train_config.beta2,
            "adam_eps": train_config.adam_eps,
            "weight_decay": train_config.weight_decay,
            "batch_size": train_config.batch_size,
        }
    atomic_write_text(arch_path(path), json.dumps(descriptor, indent=2) + "\n")


def arch_path(model_path) -> str:
    return os.fspath(model_path) + ".arch.json"


def load_model(path) -> tuple[DenseNet, TrainConfig | None]:
    weights = load_weights(path)
    try:
        with open(arch_path(path), "r", encoding="utf-8") as handle:
            descriptor = json.load(handle)
    except FileNotFoundError as err:
        raise FormatError(
            f"missing architecture descriptor {arch_path(path)!r}"
        ) from err
    except json.JSONDecodeError as err:
        raise FormatError(f"architecture descriptor is not valid JSON: {err}") from err
    try:
        specs = [(l["name"], l["activation"]) for l in descriptor["layers"]]
        net = net_from_weights(weights, int(descriptor["input_dim"]), specs)
    except (KeyError, TypeError) as err:
        raise FormatError(f"malformed architecture descriptor: {err}") from err
    config = None
    if "train" in descriptor:
        t = descriptor["train"]
        config = TrainConfig(
            optimizer=t.get("optimizer", "sgd"),
            learning_rate=float(t.get("learning_rate", 0.5)),
            momentum=float(t.get("momentum", 0.9)),
            beta2=float(t.get("beta2", 0.999)),
            adam_eps=float(t.get("adam_eps", 1e-8)),
            weight_decay=float(t.get("weight_decay", 0.0)),
            batch_size=int(t.get("batch_size", 64)),
        )
    return net, config


# --- IDX dataset files ---------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Read one array from an IDX file (big-endian, self-describing header)."""
    with open(path, "rb") as handle:
        payload = handle.read()
    if len(payload) < 4:
        raise TruncatedFileError(f"{path}: shorter than the 4-byte IDX header")
    zero0, zero1, type_code, rank = struct.unpack(">BBBB", payload[:4])
    if zero0 != 0 or zero1 != 0:
        raise FormatError(f"{path}: bad IDX magic prefix {payload[:2]!r}")
    if type_code not in _IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX type code {type_code:#x}")
    header_end = 4 + 4 * rank
    if len(payload) < header_end:
        raise TruncatedFileError(f"{path}: truncated IDX dimension list")
    shape = struct.unpack(f">{rank}I", payload[4:header_end])
    dtype = _IDX_DTYPES[type_code]
    expected = int(np.prod(shape)) * dtype.itemsize
    body = payload[header_end:]
    if len(body) != expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(body)} bytes, header promises {expected}"
        )
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = None
    for candidate, dtype in _IDX_DTYPES.items():
        if dtype.newbyteorder("=") == array.dtype:
            code = candidate
            break
    if code is None:
        raise FormatError(f"no IDX type code for dtype {array.dtype}")
    if array.ndim < 1 or array.ndim > 255:
        raise FormatError("IDX rank must be between 1 and 255")
    header = struct.pack(">BBBB", 0, 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    atomic_write_bytes(path, header + array.astype(_IDX_DTYPES[code]).tobytes())


FEATURES_FILE = "features.idx"
LABELS_FILE = "labels.idx"


def save_dataset_dir(data: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_idx(os.path.join(directory, FEATURES_FILE), data.features)
    write_idx(
        os.path.join(directory, LABELS_FILE),
        data.label_indices().astype(np.uint8),
    )


def load_dataset_dir(directory) -> Dataset:
    """Load features.idx + labels.idx; integer features are scaled by 1/255."""
    features = read_idx(os.path.join(directory, FEATURES_FILE))
    labels = read_idx(os.path.join(directory, LABELS_FILE))
    if features.ndim < 2:
        raise FormatError("feature array must have at least 2 dimensions")
    features = features.reshape(features.shape[0], -1)
    if features.dtype.kind in "iu":
        features = features.astype(np.float64) / 255.0
    else:
        features = features.astype(np.float64)
    labels = labels.astype(np.int64).reshape(-1)
    if labels.shape[0] != features.shape[0]:
        raise FormatError("feature and label files disagree on sample count")
    class_count = int(labels.max()) + 1 if labels.size else 0
    try:
        return Dataset(features, one_hot(labels, class_count), class_count)
    except ValueError as err:
        raise FormatError(f"dataset in {directory!r} is malformed: {err}") from err
