"""Pure numpy implementation of the hot kernels.

Mirrors the signatures of the compiled ``_core`` module exactly; it is used
when the extension is not built or ``WIMA_PURE_PYTHON=1`` is set.
"""

import numpy as np

LOGISTIC = 0
MLP1 = 1
RELU = 0
TANH = 1

NAME = "python"


def _softmax_xent(Z, y):
    n = Z.shape[0]
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    S = E.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(S) - Z[rows, y]))
    delta = E / S[:, None]
    delta[rows, y] -= 1.0
    delta /= n
    return loss, delta


def loss_grad(kind, params, X, y, d, H, C, act):
    """Mean cross-entropy of the batch ``(X, y)`` and its gradient w.r.t. ``params``."""
    if kind == LOGISTIC:
        W = params[: d * C].reshape(d, C)
        b = params[d * C :]
        loss, delta = _softmax_xent(X @ W + b, y)
        return loss, np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])

    o1 = d * H
    o2 = o1 + H
    o3 = o2 + H * C
    W1 = params[:o1].reshape(d, H)
    b1 = params[o1:o2]
    W2 = params[o2:o3].reshape(H, C)
    b2 = params[o3:]
    Z1 = X @ W1 + b1
    if act == RELU:
        A = np.maximum(Z1, 0.0)
    else:
        A = np.tanh(Z1)
    loss, delta = _softmax_xent(A @ W2 + b2, y)
    dA = delta @ W2.T
    if act == RELU:
        dZ = dA * (Z1 > 0.0)
    else:
        dZ = dA * (1.0 - A * A)
    return loss, np.concatenate(
        [(X.T @ dZ).ravel(), dZ.sum(axis=0), (A.T @ delta).ravel(), delta.sum(axis=0)]
    )


def local_sgd(kind, params, X, y, order, batch_size, lr, momentum, weight_decay, mu,
              anchor, correction, d, H, C, act):
    """Run mini-batch SGD over ``order`` (one row of sample indices per epoch).

    Returns ``(params, loss_sum, steps, bad_step)``; ``bad_step`` is -1 unless
    a non-finite parameter appeared, in which case training stopped there.
    """
    w = np.array(params, dtype=np.float64, copy=True)
    v = np.zeros_like(w) if momentum != 0.0 else None
    n = order.shape[1]
    steps = 0
    loss_sum = 0.0
    for epoch in range(order.shape[0]):
        for start in range(0, n, batch_size):
            rows = order[epoch, start : start + batch_size]
            loss, g = loss_grad(kind, w, X[rows], y[rows], d, H, C, act)
            loss_sum += loss
            if weight_decay != 0.0:
                g = g + weight_decay * w
            if mu != 0.0:
                g = g + mu * (w - anchor)
            if correction is not None:
                g = g + correction
            if v is not None:
                v = momentum * v + g
                g = v
            with np.errstate(over="ignore", invalid="ignore"):
                w = w - lr * g
            if not np.isfinite(w).all():
                return w, loss_sum, steps + 1, steps
            steps += 1
    return w, loss_sum, steps, -1
