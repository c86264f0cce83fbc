"""The small CNN whose adversarial examples the detector learns to flag.

Defines the network description and trained-network containers, plain
SGD-with-momentum training, prediction records, per-conv-layer feature maps
and the above-threshold prediction census.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ConvLayer,
    DenseLayer,
    MaxPoolLayer,
    ReluLayer,
    SoftmaxLayer,
    backward_pass,
    forward_pass,
    infer_shapes,
    softmax_batch,
    softmax_cross_entropy,
)
from .errors import TrainingError, ValidationError
from .tensor import ConvFilterBank, Tensor

__all__ = [
    "NetworkSpec",
    "Network",
    "PredictionRecord",
    "TrainConfig",
    "default_victim_spec",
    "train_victim",
    "predict",
    "predict_batch",
    "layer_outputs",
    "layer_outputs_batch",
    "prediction_census",
    "raw_score_percentile",
    "CensusTable",
]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptors plus input dims and class count.

    Construction checks that adjacent layers are shape-compatible and that
    there is exactly one softmax head, at the end, fed by `classes` scores.
    """

    input_dims: tuple
    classes: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "classes", int(self.classes))
        if self.classes < 1:
            raise ValidationError(f"class count must be positive, got {self.classes}")
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        heads = sum(isinstance(l, SoftmaxLayer) for l in self.layers)
        if heads != 1 or not isinstance(self.layers[-1], SoftmaxLayer):
            raise ValidationError("network needs exactly one softmax head, at the end")
        shapes = infer_shapes(self.input_dims, self.layers)
        if shapes[-1] != (self.classes,):
            raise ValidationError(
                f"softmax head receives {shapes[-1]}, expected ({self.classes},) scores"
            )

    def shapes(self):
        return infer_shapes(self.input_dims, self.layers)

    @property
    def conv_indices(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, ConvLayer))

    @property
    def conv_count(self) -> int:
        return len(self.conv_indices)

    def conv_channels(self) -> tuple:
        """Channel count of each conv layer, in depth order."""
        return tuple(self.layers[i].filters for i in self.conv_indices)


def default_victim_spec() -> NetworkSpec:
    """28x28 grayscale, two conv/pool blocks, dense head, 10 classes."""
    return NetworkSpec(
        input_dims=(28, 28, 1),
        classes=10,
        layers=(
            ConvLayer(filters=8, kernel=3),
            ReluLayer(),
            MaxPoolLayer(window=2, stride=2),
            ConvLayer(filters=16, kernel=3),
            ReluLayer(),
            MaxPoolLayer(window=2, stride=2),
            DenseLayer(units=10),
            SoftmaxLayer(),
        ),
    )


class Network:
    """An immutable trained network: spec, weights and training metadata."""

    __slots__ = ("spec", "weights", "metadata", "_flat")

    def __init__(self, spec: NetworkSpec, weights, metadata=None):
        weights = list(weights)
        if len(weights) != len(spec.layers):
            raise ValidationError(
                f"got {len(weights)} weight entries for {len(spec.layers)} layers"
            )
        shapes = spec.shapes()
        normalized = []
        flat = []
        shape_in = (spec.input_dims,) + tuple(shapes)
        for idx, layer in enumerate(spec.layers):
            entry = weights[idx]
            prev = shape_in[idx]
            if isinstance(layer, ConvLayer):
                if isinstance(entry, ConvFilterBank):
                    bank = entry
                else:
                    w, b = entry
                    bank = ConvFilterBank(w, b, stride=layer.stride, padding=layer.padding)
                expect = (layer.filters, layer.kernel, layer.kernel, prev[2])
                if bank.weights.shape != expect:
                    raise ValidationError(
                        f"conv layer {idx} weights {bank.weights.shape} != {expect}"
                    )
                if bank.stride != layer.stride or bank.padding != layer.padding:
                    raise ValidationError(f"conv layer {idx} bank stride/padding mismatch")
                normalized.append(bank)
                flat.append((bank.weights, bank.biases))
            elif isinstance(layer, DenseLayer):
                w = np.array(entry[0], dtype=np.float64)
                b = np.array(entry[1], dtype=np.float64)
                in_dim = int(np.prod(prev))
                if w.shape != (layer.units, in_dim) or b.shape != (layer.units,):
                    raise ValidationError(
                        f"dense layer {idx} weights {w.shape} != ({layer.units}, {in_dim})"
                    )
                if not (np.isfinite(w).all() and np.isfinite(b).all()):
                    raise ValidationError(f"dense layer {idx} weights are non-finite")
                w.flags.writeable = False
                b.flags.writeable = False
                normalized.append((w, b))
                flat.append((w, b))
            else:
                if entry is not None:
                    raise ValidationError(f"layer {idx} ({layer!r}) takes no weights")
                normalized.append(None)
                flat.append(None)
        self.spec = spec
        self.weights = tuple(normalized)
        self.metadata = dict(metadata or {})
        self._flat = tuple(flat)


@dataclass
class PredictionRecord:
    """Raw scores, softmax probabilities and the argmax label for one image."""

    raw: np.ndarray
    probs: np.ndarray
    label: int

    def __post_init__(self):
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValidationError("probabilities do not sum to 1")
        if int(np.argmax(self.raw)) != int(np.argmax(self.probs)):
            raise ValidationError("raw/softmax argmax disagree")
        self.label = int(self.label)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9


def _init_weights(spec: NetworkSpec, rng: np.random.Generator):
    """He-normal conv kernels, Glorot-normal dense rows, zero biases."""
    weights = []
    shape_in = (spec.input_dims,) + tuple(spec.shapes())
    for idx, layer in enumerate(spec.layers):
        prev = shape_in[idx]
        if isinstance(layer, ConvLayer):
            fan_in = layer.kernel * layer.kernel * prev[2]
            std = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, (layer.filters, layer.kernel, layer.kernel, prev[2]))
            weights.append((w, np.zeros(layer.filters)))
        elif isinstance(layer, DenseLayer):
            in_dim = int(np.prod(prev))
            std = np.sqrt(2.0 / (in_dim + layer.units))
            w = rng.normal(0.0, std, (layer.units, in_dim))
            weights.append((w, np.zeros(layer.units)))
        else:
            weights.append(None)
    return weights


def _check_image(spec: NetworkSpec, image: Tensor):
    if image.dims != spec.input_dims:
        raise ValidationError(f"image dims {image.dims} != spec input {spec.input_dims}")


def _as_batch(spec: NetworkSpec, images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        batch = np.asarray(images, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1:] != spec.input_dims:
            raise ValidationError(
                f"batch shape {batch.shape} does not match input dims {spec.input_dims}"
            )
        return batch
    tensors = list(images)
    if not tensors:
        raise ValidationError("need at least one image")
    for t in tensors:
        _check_image(spec, t)
    return np.stack([t.array for t in tensors])


def train_victim(dataset, spec: NetworkSpec, hyper: TrainConfig = TrainConfig()) -> Network:
    """SGD with momentum on softmax cross-entropy; deterministic given the seed."""
    xtr, ytr = dataset.split("train")
    if len(xtr) == 0:
        raise ValidationError("training split is empty")
    if xtr.shape[1:] != spec.input_dims:
        raise ValidationError(
            f"dataset images {xtr.shape[1:]} do not match spec input {spec.input_dims}"
        )
    if int(ytr.max()) >= spec.classes:
        raise ValidationError("dataset labels exceed the spec class count")
    if hyper.epochs < 1 or hyper.batch_size < 1 or hyper.learning_rate <= 0:
        raise ValidationError("epochs/batch size must be positive, learning rate > 0")

    rng = np.random.default_rng(hyper.seed)
    weights = _init_weights(spec, rng)
    velocity = [None if w is None else (np.zeros_like(w[0]), np.zeros_like(w[1]))
                for w in weights]
    n = len(xtr)
    last_loss = float("nan")
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            logits, tape, _ = forward_pass(spec.layers, weights, xtr[idx], keep_tape=True)
            losses, grad = softmax_cross_entropy(logits, ytr[idx])
            last_loss = float(losses.mean())
            if not np.isfinite(last_loss):
                raise TrainingError(f"training diverged (non-finite loss) at epoch {epoch + 1}")
            grads = backward_pass(tape, grad / len(idx))
            for li, g in enumerate(grads.params):
                if g is None:
                    continue
                w, b = weights[li]
                vw, vb = velocity[li]
                vw *= hyper.momentum
                vw -= hyper.learning_rate * g[0]
                vb *= hyper.momentum
                vb -= hyper.learning_rate * g[1]
                weights[li] = (w + vw, b + vb)
                velocity[li] = (vw, vb)

    network = Network(spec, weights, metadata={})
    train_acc = _accuracy(network, xtr, ytr)
    xte, yte = dataset.split("test")
    test_acc = _accuracy(network, xte, yte) if len(xte) else None
    network.metadata.update(
        seed=hyper.seed,
        epochs=hyper.epochs,
        learning_rate=hyper.learning_rate,
        batch_size=hyper.batch_size,
        momentum=hyper.momentum,
        final_loss=last_loss,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
    )
    return network


def _accuracy(network: Network, images, labels, chunk=512) -> float:
    if len(images) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(images), chunk):
        _, _, pred = predict_batch(network, images[start : start + chunk])
        hits += int((pred == labels[start : start + chunk]).sum())
    return hits / len(images)


def predict(network: Network, image: Tensor) -> PredictionRecord:
    """Full prediction record for one image; never mutates the network."""
    _check_image(network.spec, image)
    logits, _, _ = forward_pass(network.spec.layers, network._flat, image.array[None])
    raw = logits[0]
    probs = softmax_batch(logits)[0]
    return PredictionRecord(raw=raw, probs=probs, label=int(np.argmax(raw)))


def predict_batch(network: Network, images):
    """(raw, probs, labels) arrays for a batch; bit-identical to predict()."""
    batch = _as_batch(network.spec, images)
    logits, _, _ = forward_pass(network.spec.layers, network._flat, batch)
    probs = softmax_batch(logits)
    return logits, probs, np.argmax(logits, axis=1)


def layer_outputs(network: Network, image: Tensor):
    """Post-ReLU output tensor of every conv layer, in depth order."""
    _check_image(network.spec, image)
    _, _, captured = forward_pass(
        network.spec.layers, network._flat, image.array[None], capture_conv=True
    )
    return [Tensor._wrap(c[0]) for c in captured]


def layer_outputs_batch(network: Network, images, chunk=256):
    """Per-conv-layer activation arrays (N, h, w, k) for a batch of images."""
    batch = _as_batch(network.spec, images)
    parts = None
    for start in range(0, len(batch), chunk):
        _, _, captured = forward_pass(
            network.spec.layers, network._flat, batch[start : start + chunk],
            capture_conv=True,
        )
        if parts is None:
            parts = [[c] for c in captured]
        else:
            for slot, c in zip(parts, captured):
                slot.append(c)
    return [np.concatenate(slot) for slot in parts]


@dataclass
class CensusTable:
    """Mean count of classes scoring above each threshold, raw and softmax."""

    thresholds: np.ndarray
    raw_mean_counts: np.ndarray
    softmax_mean_counts: np.ndarray


def prediction_census(network: Network, images, thresholds) -> CensusTable:
    """For each threshold t, the average number of classes with score > t."""
    ts = np.asarray(thresholds, dtype=np.float64)
    if ts.ndim != 1 or ts.size == 0:
        raise ValidationError("need a non-empty list of thresholds")
    raw, probs, _ = predict_batch(network, images)
    raw_counts = (raw[:, :, None] > ts).sum(axis=1).mean(axis=0)
    soft_counts = (probs[:, :, None] > ts).sum(axis=1).mean(axis=0)
    return CensusTable(ts, raw_counts.astype(np.float64), soft_counts.astype(np.float64))


def raw_score_percentile(network: Network, images, q: float) -> float:
    """q-th percentile of the pooled raw scores (all classes, all images)."""
    raw, _, _ = predict_batch(network, images)
    return float(np.percentile(raw.reshape(-1), q))
