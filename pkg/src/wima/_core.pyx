# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: softmax cross-entropy gradients and the local SGD loop.

Same signatures as ``wima._fallback``. All sums run sequentially over samples
and features so results do not depend on BLAS threading.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh, isfinite
from libc.stdlib cimport malloc, free

ctypedef cnp.int64_t idx_t

LOGISTIC = 0
MLP1 = 1
RELU = 0
TANH = 1

NAME = "cython"


cdef inline Py_ssize_t _num_params(int kind, int d, int H, int C) noexcept nogil:
    if kind == 0:
        return d * C + C
    return d * H + H + H * C + C


cdef double _batch_loss_grad(int kind, const double* p, const double* X, const idx_t* y,
                             const idx_t* rows, Py_ssize_t n, int d, int H, int C, int act,
                             double* g, double* work) noexcept nogil:
    # work holds C logits, then H pre-activations, then H activations
    cdef Py_ssize_t P = _num_params(kind, d, H, C)
    cdef double* z = work
    cdef double* zh = work + C
    cdef double* a = work + C + H
    cdef Py_ssize_t i, j, c, h, k, r, yi
    cdef double s, m, ly, loss = 0.0, delta, dz, inv_n
    cdef const double* x
    cdef const double* W1
    cdef const double* b1
    cdef const double* W2
    cdef const double* b2
    cdef double* gW1
    cdef double* gb1
    cdef double* gW2
    cdef double* gb2

    for k in range(P):
        g[k] = 0.0

    if kind == 0:
        W2 = p
        b2 = p + d * C
        gW2 = g
        gb2 = g + d * C
    else:
        W1 = p
        b1 = p + d * H
        W2 = p + d * H + H
        b2 = p + d * H + H + H * C
        gW1 = g
        gb1 = g + d * H
        gW2 = g + d * H + H
        gb2 = g + d * H + H + H * C

    for i in range(n):
        r = rows[i]
        x = X + r * d
        yi = y[r]
        if kind == 0:
            for c in range(C):
                s = b2[c]
                for j in range(d):
                    s = s + x[j] * W2[j * C + c]
                z[c] = s
        else:
            for h in range(H):
                s = b1[h]
                for j in range(d):
                    s = s + x[j] * W1[j * H + h]
                zh[h] = s
                if act == 0:
                    a[h] = s if s > 0.0 else 0.0
                else:
                    a[h] = tanh(s)
            for c in range(C):
                s = b2[c]
                for h in range(H):
                    s = s + a[h] * W2[h * C + c]
                z[c] = s

        m = z[0]
        for c in range(1, C):
            if z[c] > m:
                m = z[c]
        ly = z[yi] - m
        s = 0.0
        for c in range(C):
            z[c] = exp(z[c] - m)
            s = s + z[c]
        loss = loss + (log(s) - ly)
        for c in range(C):
            z[c] = z[c] / s
        z[yi] = z[yi] - 1.0

        if kind == 0:
            for c in range(C):
                delta = z[c]
                gb2[c] = gb2[c] + delta
                for j in range(d):
                    gW2[j * C + c] = gW2[j * C + c] + x[j] * delta
        else:
            for c in range(C):
                delta = z[c]
                gb2[c] = gb2[c] + delta
                for h in range(H):
                    gW2[h * C + c] = gW2[h * C + c] + a[h] * delta
            for h in range(H):
                s = 0.0
                for c in range(C):
                    s = s + W2[h * C + c] * z[c]
                if act == 0:
                    dz = s if zh[h] > 0.0 else 0.0
                else:
                    dz = s * (1.0 - a[h] * a[h])
                gb1[h] = gb1[h] + dz
                for j in range(d):
                    gW1[j * H + h] = gW1[j * H + h] + x[j] * dz

    inv_n = 1.0 / n
    for k in range(P):
        g[k] = g[k] * inv_n
    return loss * inv_n


def loss_grad(int kind, params, X, y, int d, int H, int C, int act):
    """Mean cross-entropy of the batch ``(X, y)`` and its gradient w.r.t. ``params``."""
    cdef const double[::1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const idx_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef idx_t[::1] rows = np.arange(n, dtype=np.int64)
    grad = np.empty(_num_params(kind, d, H, C), dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double* work = <double*> malloc((C + 2 * H + 1) * sizeof(double))
    cdef double loss
    if work == NULL:
        raise MemoryError()
    try:
        with nogil:
            loss = _batch_loss_grad(kind, &p[0], &Xv[0, 0], &yv[0], &rows[0], n, d, H, C, act,
                                    &gv[0], work)
    finally:
        free(work)
    return loss, grad


def local_sgd(int kind, params, X, y, order, Py_ssize_t batch_size, double lr, double momentum,
              double weight_decay, double mu, anchor, correction, int d, int H, int C, int act):
    """Run mini-batch SGD over ``order`` (one row of sample indices per epoch).

    Returns ``(params, loss_sum, steps, bad_step)``; ``bad_step`` is -1 unless
    a non-finite parameter appeared, in which case training stopped there.
    """
    w_arr = np.array(params, dtype=np.float64, copy=True)
    cdef double[::1] w = w_arr
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const idx_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef const idx_t[:, ::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t P = _num_params(kind, d, H, C)
    cdef bint has_mu = mu != 0.0
    cdef bint has_corr = correction is not None
    cdef bint has_mom = momentum != 0.0
    cdef bint has_wd = weight_decay != 0.0
    cdef const double[::1] anc = np.ascontiguousarray(anchor if has_mu else w_arr, dtype=np.float64)
    cdef const double[::1] corr = np.ascontiguousarray(correction if has_corr else w_arr,
                                                        dtype=np.float64)
    cdef double[::1] v = np.zeros(P, dtype=np.float64)
    cdef double[::1] g = np.empty(P, dtype=np.float64)
    cdef Py_ssize_t n = ov.shape[1], epochs = ov.shape[0]
    cdef Py_ssize_t e, start, stop, k, steps = 0, bad_step = -1
    cdef double loss_sum = 0.0, gk
    cdef bint bad = False
    cdef double* work = <double*> malloc((C + 2 * H + 1) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        with nogil:
            for e in range(epochs):
                start = 0
                while start < n:
                    stop = start + batch_size
                    if stop > n:
                        stop = n
                    loss_sum = loss_sum + _batch_loss_grad(
                        kind, &w[0], &Xv[0, 0], &yv[0], &ov[e, start], stop - start,
                        d, H, C, act, &g[0], work)
                    for k in range(P):
                        gk = g[k]
                        if has_wd:
                            gk = gk + weight_decay * w[k]
                        if has_mu:
                            gk = gk + mu * (w[k] - anc[k])
                        if has_corr:
                            gk = gk + corr[k]
                        if has_mom:
                            v[k] = momentum * v[k] + gk
                            gk = v[k]
                        w[k] = w[k] - lr * gk
                        if not isfinite(w[k]):
                            bad = True
                    if bad:
                        bad_step = steps
                        steps += 1
                        break
                    steps += 1
                    start = stop
                if bad:
                    break
    finally:
        free(work)
    return w_arr, loss_sum, steps, bad_step
