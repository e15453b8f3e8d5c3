"""Numba twins of the reference kernels.

Same contracts as ``numpy_impl``; explicit per-pixel loops arranged so the
inner dimension is always contiguous (LLVM vectorizes them). Single-threaded
on purpose: run-to-run determinism matters more here than parallel speedups.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# fastmath lets LLVM vectorize the dot-product reductions; it reorders
# float additions, so the two backends agree to rounding, not bitwise
_OPTS = dict(cache=True, nogil=True, fastmath=True)


@njit(**_OPTS)
def embed(X, W1, b1, W2, b2):
    P, d = X.shape
    eh = W1.shape[0]
    e = W2.shape[0]
    Z = np.empty((P, e))
    h = np.empty(eh)
    for i in range(P):
        for j in range(eh):
            s = b1[j]
            for k in range(d):
                s += W1[j, k] * X[i, k]
            h[j] = s if s > 0.0 else 0.0
        for j in range(e):
            s = b2[j]
            for k in range(eh):
                s += W2[j, k] * h[k]
            Z[i, j] = s
    return Z


@njit(**_OPTS)
def train_full(X, y, W1, b1, W2, b2, CW, cb):
    P, d = X.shape
    eh = W1.shape[0]
    e = W2.shape[0]
    K = CW.shape[0]

    dW1 = np.zeros((eh, d))
    db1 = np.zeros(eh)
    dW2 = np.zeros((e, eh))
    db2 = np.zeros(e)
    dCW = np.zeros((K, e))
    dcb = np.zeros(K)

    hpre = np.empty(eh)
    h = np.empty(eh)
    z = np.empty(e)
    logit = np.empty(K)
    p = np.empty(K)
    dz = np.empty(e)
    dh = np.empty(eh)

    loss = 0.0
    n = 0
    for i in range(P):
        yi = y[i]
        if yi < 0:
            continue
        n += 1

        for j in range(eh):
            s = b1[j]
            for k in range(d):
                s += W1[j, k] * X[i, k]
            hpre[j] = s
            h[j] = s if s > 0.0 else 0.0
        for j in range(e):
            s = b2[j]
            for k in range(eh):
                s += W2[j, k] * h[k]
            z[j] = s
        m = -np.inf
        for c in range(K):
            s = cb[c]
            for k in range(e):
                s += CW[c, k] * z[k]
            logit[c] = s
            if s > m:
                m = s
        sexp = 0.0
        for c in range(K):
            p[c] = np.exp(logit[c] - m)
            sexp += p[c]
        loss += -(logit[yi] - m - np.log(sexp))

        # gradient of the summed loss; p becomes dL/dlogit
        for c in range(K):
            p[c] /= sexp
        p[yi] -= 1.0

        for c in range(K):
            g = p[c]
            dcb[c] += g
            for k in range(e):
                dCW[c, k] += g * z[k]
        for k in range(e):
            s = 0.0
            for c in range(K):
                s += CW[c, k] * p[c]
            dz[k] = s
        for j in range(e):
            g = dz[j]
            db2[j] += g
            for k in range(eh):
                dW2[j, k] += g * h[k]
        for k in range(eh):
            dh[k] = 0.0
        for j in range(e):
            g = dz[j]
            for k in range(eh):
                dh[k] += W2[j, k] * g
        for j in range(eh):
            if hpre[j] > 0.0:
                g = dh[j]
                db1[j] += g
                for k in range(d):
                    dW1[j, k] += g * X[i, k]
    return loss, n, dW1, db1, dW2, db2, dCW, dcb


@njit(**_OPTS)
def train_head(Z, y, CW, cb):
    P, e = Z.shape
    K = CW.shape[0]
    dCW = np.zeros((K, e))
    dcb = np.zeros(K)
    logit = np.empty(K)
    p = np.empty(K)
    loss = 0.0
    n = 0
    for i in range(P):
        yi = y[i]
        if yi < 0:
            continue
        n += 1
        m = -np.inf
        for c in range(K):
            s = cb[c]
            for k in range(e):
                s += CW[c, k] * Z[i, k]
            logit[c] = s
            if s > m:
                m = s
        sexp = 0.0
        for c in range(K):
            p[c] = np.exp(logit[c] - m)
            sexp += p[c]
        loss += -(logit[yi] - m - np.log(sexp))
        for c in range(K):
            p[c] /= sexp
        p[yi] -= 1.0
        for c in range(K):
            g = p[c]
            dcb[c] += g
            for k in range(e):
                dCW[c, k] += g * Z[i, k]
    return loss, n, dCW, dcb


@njit(**_OPTS)
def predict(Z, CW, cb):
    P, e = Z.shape
    K = CW.shape[0]
    out = np.empty(P, dtype=np.int64)
    for i in range(P):
        best = -np.inf
        arg = 0
        for c in range(K):
            s = cb[c]
            for k in range(e):
                s += CW[c, k] * Z[i, k]
            if s > best:
                best = s
                arg = c
        out[i] = arg
    return out


@njit(**_OPTS)
def confusion_add(conf, y_true, y_pred):
    for i in range(y_true.shape[0]):
        t = y_true[i]
        if t >= 0:
            conf[t, y_pred[i]] += 1


@njit(**_OPTS)
def prototype_accumulate(sums, counts, Z, y):
    e = Z.shape[1]
    for i in range(y.shape[0]):
        c = y[i]
        if c >= 0:
            counts[c] += 1
            for k in range(e):
                sums[c, k] += Z[i, k]
