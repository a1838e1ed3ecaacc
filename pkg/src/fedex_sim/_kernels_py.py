"""Pure-numpy loss/gradient kernels; the reference backend.

Each kernel returns ``(loss, grad, per_sample_losses)`` where ``loss`` includes
the l2 term, ``grad`` is its exact analytic gradient with respect to the flat
parameter vector, and ``per_sample_losses`` excludes the regularizer.

Parameter layouts (row-major flattening):
  logistic: W[p, C], b[C]
  mlp:      W1[p, h], b1[h], W2[h, C], b2[C]   (tanh hidden activation)
  quadratic: the parameter vector itself, loss ||w||^2/2 per sample
"""

from __future__ import annotations

import numpy as np


def _softmax_ce(z: np.ndarray, labels: np.ndarray):
    """Return (per_sample_losses, dz) for mean cross-entropy over logits z."""
    n = z.shape[0]
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    idx = np.arange(n)
    per_sample = np.log(denom) - z[idx, labels]
    dz = ez / denom[:, None]
    dz[idx, labels] -= 1.0
    dz /= n
    return per_sample, dz


def logistic_loss_grad(params, X, labels, n_classes, l2):
    n, p = X.shape
    W = params[: p * n_classes].reshape(p, n_classes)
    b = params[p * n_classes :]
    per_sample, dz = _softmax_ce(X @ W + b, labels)
    loss = float(per_sample.mean())
    grad = np.empty_like(params)
    grad[: p * n_classes] = (X.T @ dz).ravel()
    grad[p * n_classes :] = dz.sum(axis=0)
    if l2:
        loss += 0.5 * l2 * float(params @ params)
        grad += l2 * params
    return loss, grad, per_sample


def mlp_loss_grad(params, X, labels, n_classes, hidden, l2):
    n, p = X.shape
    o = 0
    W1 = params[o : o + p * hidden].reshape(p, hidden)
    o += p * hidden
    b1 = params[o : o + hidden]
    o += hidden
    W2 = params[o : o + hidden * n_classes].reshape(hidden, n_classes)
    o += hidden * n_classes
    b2 = params[o:]

    a1 = np.tanh(X @ W1 + b1)
    per_sample, dz = _softmax_ce(a1 @ W2 + b2, labels)
    loss = float(per_sample.mean())

    dz1 = (dz @ W2.T) * (1.0 - a1 * a1)
    grad = np.empty_like(params)
    o = 0
    grad[o : o + p * hidden] = (X.T @ dz1).ravel()
    o += p * hidden
    grad[o : o + hidden] = dz1.sum(axis=0)
    o += hidden
    grad[o : o + hidden * n_classes] = (a1.T @ dz).ravel()
    o += hidden * n_classes
    grad[o:] = dz.sum(axis=0)
    if l2:
        loss += 0.5 * l2 * float(params @ params)
        grad += l2 * params
    return loss, grad, per_sample


def quadratic_loss_grad(params, n_batch, l2):
    half = 0.5 * float(params @ params)
    per_sample = np.full(n_batch, half)
    loss = half * (1.0 + l2)
    grad = (1.0 + l2) * params
    return loss, grad, per_sample
