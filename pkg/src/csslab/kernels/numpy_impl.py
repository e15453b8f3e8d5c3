"""Pure-numpy reference kernels.

These are the semantics of record: the numba twins in ``numba_impl`` must
agree with them to float rounding. All kernels take C-contiguous float64
parameter arrays, float64 pixel matrices of shape (P, d), and int64 label
vectors where negative entries mark ignored pixels.

Gradient kernels return sums over valid pixels; callers divide by the valid
count to obtain mean-loss gradients.
"""

from __future__ import annotations

import numpy as np


def embed(X, W1, b1, W2, b2):
    """Two-layer ReLU backbone applied per pixel: (P, d) -> (P, e)."""
    H = np.maximum(X @ W1.T + b1, 0.0)
    return H @ W2.T + b2


def train_full(X, y, W1, b1, W2, b2, CW, cb):
    """Forward + softmax cross-entropy + full backward pass.

    Returns (loss_sum, n_valid, dW1, db1, dW2, db2, dCW, dcb) where the
    gradients are of the summed loss over the n_valid non-ignored pixels.
    """
    Hpre = X @ W1.T + b1
    H = np.maximum(Hpre, 0.0)
    Z = H @ W2.T + b2
    L = Z @ CW.T + cb

    valid = y >= 0
    n = int(valid.sum())
    rows = np.nonzero(valid)[0]
    yv = y[rows]

    Lmax = L.max(axis=1, keepdims=True)
    expL = np.exp(L - Lmax)
    S = expL.sum(axis=1, keepdims=True)
    loss = float(-(L[rows, yv] - Lmax[rows, 0] - np.log(S[rows, 0])).sum())

    G = expL / S
    G[rows, yv] -= 1.0
    G[~valid] = 0.0

    dCW = G.T @ Z
    dcb = G.sum(axis=0)
    dZ = G @ CW
    dW2 = dZ.T @ H
    db2 = dZ.sum(axis=0)
    dH = dZ @ W2
    dH[Hpre <= 0.0] = 0.0
    dW1 = dH.T @ X
    db1 = dH.sum(axis=0)
    return loss, n, dW1, db1, dW2, db2, dCW, dcb


def train_head(Z, y, CW, cb):
    """Classifier-only pass over precomputed embeddings (frozen backbone)."""
    L = Z @ CW.T + cb
    valid = y >= 0
    n = int(valid.sum())
    rows = np.nonzero(valid)[0]
    yv = y[rows]

    Lmax = L.max(axis=1, keepdims=True)
    expL = np.exp(L - Lmax)
    S = expL.sum(axis=1, keepdims=True)
    loss = float(-(L[rows, yv] - Lmax[rows, 0] - np.log(S[rows, 0])).sum())

    G = expL / S
    G[rows, yv] -= 1.0
    G[~valid] = 0.0
    dCW = G.T @ Z
    dcb = G.sum(axis=0)
    return loss, n, dCW, dcb


def predict(Z, CW, cb):
    """Argmax class per pixel; ties resolve to the lowest row index."""
    return np.argmax(Z @ CW.T + cb, axis=1).astype(np.int64)


def confusion_add(conf, y_true, y_pred):
    """Accumulate rows=truth, cols=prediction; negative truths are skipped."""
    valid = y_true >= 0
    K = conf.shape[0]
    flat = y_true[valid] * K + y_pred[valid]
    conf += np.bincount(flat, minlength=K * K).reshape(K, K).astype(np.int64)


def prototype_accumulate(sums, counts, Z, y):
    """Per-class embedding sums and pixel counts; negative labels skipped."""
    valid = y >= 0
    yv = y[valid]
    np.add.at(sums, yv, Z[valid])
    counts += np.bincount(yv, minlength=counts.shape[0]).astype(np.int64)
