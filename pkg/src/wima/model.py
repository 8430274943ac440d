"""Small softmax classifiers with hand-derived gradients.

Two architectures are supported:

``logistic``
    multinomial logistic regression; one ``classifier`` segment holding the
    ``input_dim x num_classes`` weight matrix (row-major) followed by the
    bias.
``mlp1``
    one hidden layer with ReLU or tanh; a ``feature_extractor`` segment
    (first-layer weights + bias) and a ``classifier`` segment (output
    weights + bias).

The softmax subtracts the row maximum before exponentiating. Gradients are
computed by the kernel backend selected in :mod:`wima._backend`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _backend
from .errors import DimensionError, UsageError
from .paramvec import CLASSIFIER, FEATURE_EXTRACTOR, ParamLayout, ParamVector, Segment

KINDS = ("logistic", "mlp1")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.input_dim < 1:
            raise UsageError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise UsageError("num_classes must be >= 2")
        if self.kind == "mlp1":
            if self.hidden_dim < 1:
                raise UsageError("mlp1 needs hidden_dim >= 1")
            if self.activation not in ACTIVATIONS:
                raise UsageError(f"activation must be one of {ACTIVATIONS}")
        elif self.hidden_dim != 0:
            raise UsageError("logistic model takes hidden_dim = 0")

    @cached_property
    def layout(self) -> ParamLayout:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logistic":
            return ParamLayout((Segment(CLASSIFIER, d * c + c, CLASSIFIER),))
        return ParamLayout(
            (
                Segment(FEATURE_EXTRACTOR, d * h + h, FEATURE_EXTRACTOR),
                Segment(CLASSIFIER, h * c + c, CLASSIFIER),
            )
        )

    @property
    def kernel_args(self) -> tuple[int, int, int, int, int]:
        """``(kind, d, H, C, act)`` codes understood by the kernel backends."""
        return (
            KINDS.index(self.kind),
            self.input_dim,
            self.hidden_dim,
            self.num_classes,
            ACTIVATIONS.index(self.activation),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise UsageError(f"batch shapes disagree: features {X.shape}, labels {y.shape}")
        if X.shape[0] < 1:
            raise UsageError("empty batch")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.kind == "logistic":
        parts = [rng.normal(0.0, 1.0 / np.sqrt(d), size=d * c), np.zeros(c)]
    else:
        parts = [
            rng.normal(0.0, 1.0 / np.sqrt(d), size=d * h),
            np.zeros(h),
            rng.normal(0.0, 1.0 / np.sqrt(h), size=h * c),
            np.zeros(c),
        ]
    return ParamVector(np.concatenate(parts), spec.layout, copy=False)


def check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.features.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}"
        )
    if not np.isfinite(batch.features).all():
        raise UsageError("batch contains non-finite features")
    y = batch.labels
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise UsageError(f"labels must lie in [0, {spec.num_classes}), got [{y.min()}, {y.max()}]")


def _check_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.layout != spec.layout:
        raise DimensionError("parameter layout does not match the model spec")


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean cross-entropy over ``batch`` and its exact gradient."""
    _check_params(spec, params)
    check_batch(spec, batch)
    kind, d, h, c, act = spec.kernel_args
    loss, grad = _backend.kernels.loss_grad(kind, params.values, batch.features, batch.labels, d, h, c, act)
    return loss, ParamVector(grad, spec.layout, copy=False)


def logits(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    _check_params(spec, params)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"features of shape {X.shape} do not match input_dim {spec.input_dim}")
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    p = params.values
    if spec.kind == "logistic":
        return X @ p[: d * c].reshape(d, c) + p[d * c :]
    o1, o2, o3 = d * h, d * h + h, d * h + h + h * c
    Z = X @ p[:o1].reshape(d, h) + p[o1:o2]
    A = np.maximum(Z, 0.0) if spec.activation == "relu" else np.tanh(Z)
    return A @ p[o2:o3].reshape(h, c) + p[o3:]


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class id."""
    return np.argmax(logits(spec, params, features), axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(spec, params, features) == np.asarray(labels)))
