"""Independent reference computations used as test oracles."""

import numpy as np

from wima.model import ModelSpec, logits
from wima.paramvec import ParamVector

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-9  # floor for coordinates whose true gradient is ~0


def reference_loss(spec: ModelSpec, p: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy from the numpy forward pass, log-sum-exp with max shift."""
    Z = logits(spec, ParamVector(p, spec.layout), X)
    m = Z.max(axis=1)
    lse = np.log(np.exp(Z - m[:, None]).sum(axis=1)) + m
    return float(np.mean(lse - Z[np.arange(len(y)), y]))


def central_differences(spec, p, X, y, h=FD_STEP) -> np.ndarray:
    out = np.empty_like(p)
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = h
        out[k] = (reference_loss(spec, p + e, X, y) - reference_loss(spec, p - e, X, y)) / (2 * h)
    return out


def gradient_mismatch(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    """Per-coordinate excess over the tolerance; all entries <= 0 means agreement."""
    tol = FD_RTOL * np.maximum(np.abs(analytic), np.abs(fd)) + FD_ATOL
    return np.abs(analytic - fd) - tol


def logistic_grad(p: np.ndarray, X: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    """Closed-form softmax-regression gradient: ``X^T (softmax - onehot) / n`` and the bias mean."""
    d = X.shape[1]
    Z = X @ p[: d * C].reshape(d, C) + p[d * C :]
    P = np.exp(Z - Z.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(len(y)), y] -= 1.0
    P /= len(y)
    return np.concatenate([(X.T @ P).ravel(), P.sum(axis=0)])


def sgd_oracle(p, X, y, C, orders, batch_size, lr, momentum=0.0, correction=None, mu=0.0):
    """Plain-numpy local SGD for the logistic model; mirrors the documented update order."""
    w = p.copy()
    anchor = p.copy()
    v = np.zeros_like(w)
    steps = 0
    for order in orders:
        for s in range(0, len(order), batch_size):
            rows = order[s : s + batch_size]
            g = logistic_grad(w, X[rows], y[rows], C)
            if mu:
                g = g + mu * (w - anchor)
            if correction is not None:
                g = g + correction
            v = momentum * v + g
            w = w - lr * v
            steps += 1
    return w, steps
