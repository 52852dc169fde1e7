"""Desk-scale supervised models with exact hand-derived gradients.

Two architectures: a linear softmax classifier and a one-hidden-layer
network with a rectifier activation (subgradient 0 at the kink). Both are
small enough that every gradient can be checked coordinate-wise against
finite differences, which is what the protocol-level guarantees of this
package rest on.

All training state lives in flat ParamVectors; operations here are pure
functions of their inputs and the explicitly passed RNG streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .params import Layout, ParamVector
from .streams import stream

__all__ = [
    "Example",
    "Dataset",
    "ModelSpec",
    "TrainConfig",
    "PerBatchNoise",
    "model_layout",
    "param_count",
    "init_model",
    "logits",
    "loss",
    "gradient",
    "local_train",
    "evaluate",
]

LINEAR = "linear-softmax"
HIDDEN = "one-hidden-layer"


@dataclass(frozen=True, eq=False)
class Example:
    """One (input, label) pair; inputs are expected in [0, 1]."""

    input: np.ndarray
    label: int


class Dataset:
    """A stack of examples stored as dense arrays for fast batching."""

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array (examples x dim)")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must align with features")
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        self.features = features
        self.labels = labels

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i: int) -> Example:
        return Example(self.features[i], int(self.labels[i]))

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices])

    @classmethod
    def from_examples(cls, examples: list[Example]) -> "Dataset":
        feats = np.stack([ex.input for ex in examples])
        labs = np.array([ex.label for ex in examples], dtype=np.int64)
        return cls(feats, labs)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameter layout is derivable from it.

    hidden_dim == 0 selects the linear softmax model.
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (LINEAR, HIDDEN):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == HIDDEN and self.hidden_dim < 1:
            raise ValueError("one-hidden-layer model needs hidden_dim >= 1")
        if self.kind == LINEAR and self.hidden_dim != 0:
            raise ValueError("linear model must have hidden_dim == 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    local_epochs: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")


@dataclass
class PerBatchNoise:
    """Gaussian noise added to the model after every batch step.

    Off by default in the protocol: the privacy mechanism perturbs the
    clipped delta once at upload time. This hook exists for fidelity
    experiments with in-loop noising; it owns its RNG so enabling it never
    disturbs the shuffle stream.
    """

    std: float
    rng: np.random.Generator


def model_layout(spec: ModelSpec) -> Layout:
    if spec.kind == LINEAR:
        w = spec.num_classes * spec.input_dim
        segs = (
            ("linear.weight", 0, w),
            ("linear.bias", w, w + spec.num_classes),
        )
        return Layout(segs, w + spec.num_classes)
    w1 = spec.hidden_dim * spec.input_dim
    b1 = w1 + spec.hidden_dim
    w2 = b1 + spec.num_classes * spec.hidden_dim
    b2 = w2 + spec.num_classes
    segs = (
        ("hidden.weight", 0, w1),
        ("hidden.bias", w1, b1),
        ("output.weight", b1, w2),
        ("output.bias", w2, b2),
    )
    return Layout(segs, b2)


def param_count(spec: ModelSpec) -> int:
    return model_layout(spec).dim


def init_model(spec: ModelSpec) -> ParamVector:
    """Deterministic small-scale init: weights ~ N(0, 1/fan_in), biases zero."""
    layout = model_layout(spec)
    rng = stream(spec.seed, "model-init")
    model = ParamVector.zeros(layout)
    if spec.kind == LINEAR:
        w = rng.normal(0.0, 1.0 / np.sqrt(spec.input_dim), size=spec.num_classes * spec.input_dim)
        model.segment("linear.weight")[:] = w
    else:
        w1 = rng.normal(0.0, 1.0 / np.sqrt(spec.input_dim), size=spec.hidden_dim * spec.input_dim)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(spec.hidden_dim), size=spec.num_classes * spec.hidden_dim)
        model.segment("hidden.weight")[:] = w1
        model.segment("output.weight")[:] = w2
    return model


def _unpack_linear(model: ParamVector, spec: ModelSpec):
    w = model.segment("linear.weight").reshape(spec.num_classes, spec.input_dim)
    b = model.segment("linear.bias")
    return w, b


def _unpack_hidden(model: ParamVector, spec: ModelSpec):
    w1 = model.segment("hidden.weight").reshape(spec.hidden_dim, spec.input_dim)
    b1 = model.segment("hidden.bias")
    w2 = model.segment("output.weight").reshape(spec.num_classes, spec.hidden_dim)
    b2 = model.segment("output.bias")
    return w1, b1, w2, b2


def logits(model: ParamVector, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    """Class scores for a batch, shape (n, num_classes)."""
    features = np.atleast_2d(features)
    if features.shape[1] != spec.input_dim:
        raise ValueError(f"feature dim {features.shape[1]} != model input dim {spec.input_dim}")
    if spec.kind == LINEAR:
        w, b = _unpack_linear(model, spec)
        return features @ w.T + b
    w1, b1, w2, b2 = _unpack_hidden(model, spec)
    hidden = np.maximum(features @ w1.T + b1, 0.0)
    return hidden @ w2.T + b2


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss(model: ParamVector, spec: ModelSpec, data: Dataset) -> float:
    """Mean cross-entropy of the softmax outputs over the dataset."""
    log_probs = _log_softmax(logits(model, spec, data.features))
    picked = log_probs[np.arange(data.size), data.labels]
    return float(-picked.mean())


def gradient(model: ParamVector, spec: ModelSpec, batch: Dataset) -> ParamVector:
    """Exact mean gradient of `loss` over the batch, in model layout."""
    if batch.size < 1:
        raise ValueError("gradient needs a nonempty batch")
    x = batch.features
    n = batch.size
    grad = ParamVector.zeros(model.layout)
    if spec.kind == LINEAR:
        scores = logits(model, spec, x)
        delta = softmax(scores)
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        grad.segment("linear.weight")[:] = (delta.T @ x).ravel()
        grad.segment("linear.bias")[:] = delta.sum(axis=0)
        return grad
    w1, b1, w2, b2 = _unpack_hidden(model, spec)
    pre = x @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    delta = softmax(hidden @ w2.T + b2)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grad.segment("output.weight")[:] = (delta.T @ hidden).ravel()
    grad.segment("output.bias")[:] = delta.sum(axis=0)
    # rectifier subgradient is 0 exactly at the kink
    back = (delta @ w2) * (pre > 0.0)
    grad.segment("hidden.weight")[:] = (back.T @ x).ravel()
    grad.segment("hidden.bias")[:] = back.sum(axis=0)
    return grad


def local_train(
    model: ParamVector,
    spec: ModelSpec,
    data: Dataset,
    cfg: TrainConfig,
    noise: Optional[PerBatchNoise],
    rng: np.random.Generator,
) -> ParamVector:
    """Mini-batch SGD for cfg.local_epochs epochs with seeded shuffling.

    Returns the updated model; the input model is untouched. Shuffling
    consumes only from `rng`, so the result is a pure function of
    (inputs, stream states).
    """
    values = model.values.copy()
    n = data.size
    batch = min(cfg.batch_size, n)
    work = model.with_values(values)  # shares `values`; updates in place below
    full_batch = batch >= n  # shuffling a single full batch changes nothing
    for _ in range(cfg.local_epochs):
        if full_batch:
            g = gradient(work, spec, data)
            values -= cfg.learning_rate * g.values
            if noise is not None and noise.std > 0:
                values += noise.rng.normal(0.0, noise.std, size=values.shape)
            continue
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            g = gradient(work, spec, data.subset(idx))
            values -= cfg.learning_rate * g.values
            if noise is not None and noise.std > 0:
                values += noise.rng.normal(0.0, noise.std, size=values.shape)
    return work


def evaluate(model: ParamVector, spec: ModelSpec, data: Dataset) -> float:
    """Fraction of examples whose argmax score matches the label.

    Ties pick the lowest class index.
    """
    if data.size < 1:
        raise ValueError("evaluate needs a nonempty dataset")
    predictions = np.argmax(logits(model, spec, data.features), axis=1)
    return float(np.mean(predictions == data.labels))
