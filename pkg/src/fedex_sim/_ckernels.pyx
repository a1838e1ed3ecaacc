# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loss/gradient kernels.

Same contract as _kernels_py (the reference backend): each kernel returns
(loss, grad, per_sample_losses) with the l2 term in loss/grad only. The loops
are written per sample so no temporaries scale with the batch; at the desk
sizes this simulator runs (batches of tens, dimensions of hundreds) that beats
vectorized numpy mostly by skipping per-call overhead.
"""

from libc.math cimport exp, log, tanh

import numpy as np

cimport numpy as cnp

cnp.import_array()


def logistic_loss_grad(double[::1] params, double[:, ::1] X,
                       cnp.int64_t[::1] labels, int n_classes, double l2):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], C = n_classes
    cdef Py_ssize_t i, j, c, base, y
    cdef double xij, zmax, s, logsum, pc, loss

    grad_arr = np.zeros(params.shape[0], dtype=np.float64)
    ps_arr = np.empty(n, dtype=np.float64)
    z_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[::1] ps = ps_arr
    cdef double[::1] z = z_arr

    loss = 0.0
    for i in range(n):
        for c in range(C):
            z[c] = params[p * C + c]
        for j in range(p):
            xij = X[i, j]
            base = j * C
            for c in range(C):
                z[c] += xij * params[base + c]
        zmax = z[0]
        for c in range(1, C):
            if z[c] > zmax:
                zmax = z[c]
        s = 0.0
        for c in range(C):
            s += exp(z[c] - zmax)
        logsum = log(s) + zmax
        y = labels[i]
        ps[i] = logsum - z[y]
        loss += ps[i]
        # reuse z as dz = softmax - onehot
        for c in range(C):
            pc = exp(z[c] - logsum)
            if c == y:
                pc -= 1.0
            z[c] = pc
        for j in range(p):
            xij = X[i, j]
            base = j * C
            for c in range(C):
                grad[base + c] += xij * z[c]
        for c in range(C):
            grad[p * C + c] += z[c]

    loss /= n
    for j in range(grad.shape[0]):
        grad[j] /= n
    if l2 != 0.0:
        s = 0.0
        for j in range(params.shape[0]):
            s += params[j] * params[j]
            grad[j] += l2 * params[j]
        loss += 0.5 * l2 * s
    return loss, grad_arr, ps_arr


def mlp_loss_grad(double[::1] params, double[:, ::1] X,
                  cnp.int64_t[::1] labels, int n_classes, int hidden,
                  double l2):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], C = n_classes, h = hidden
    cdef Py_ssize_t i, j, c, k, y
    cdef Py_ssize_t ob1 = p * h, ow2 = p * h + h, ob2 = p * h + h + h * C
    cdef double xij, a, zmax, s, logsum, pc, loss, d

    grad_arr = np.zeros(params.shape[0], dtype=np.float64)
    ps_arr = np.empty(n, dtype=np.float64)
    a1_arr = np.empty(h, dtype=np.float64)
    z_arr = np.empty(C, dtype=np.float64)
    dz1_arr = np.empty(h, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[::1] ps = ps_arr
    cdef double[::1] a1 = a1_arr
    cdef double[::1] z = z_arr
    cdef double[::1] dz1 = dz1_arr

    loss = 0.0
    for i in range(n):
        for k in range(h):
            a1[k] = params[ob1 + k]
        for j in range(p):
            xij = X[i, j]
            for k in range(h):
                a1[k] += xij * params[j * h + k]
        for k in range(h):
            a1[k] = tanh(a1[k])
        for c in range(C):
            z[c] = params[ob2 + c]
        for k in range(h):
            a = a1[k]
            for c in range(C):
                z[c] += a * params[ow2 + k * C + c]
        zmax = z[0]
        for c in range(1, C):
            if z[c] > zmax:
                zmax = z[c]
        s = 0.0
        for c in range(C):
            s += exp(z[c] - zmax)
        logsum = log(s) + zmax
        y = labels[i]
        ps[i] = logsum - z[y]
        loss += ps[i]
        for c in range(C):
            pc = exp(z[c] - logsum)
            if c == y:
                pc -= 1.0
            z[c] = pc  # z now holds dz
        # second layer grads and backprop into dz1
        for k in range(h):
            a = a1[k]
            d = 0.0
            for c in range(C):
                grad[ow2 + k * C + c] += a * z[c]
                d += z[c] * params[ow2 + k * C + c]
            dz1[k] = d * (1.0 - a * a)
        for c in range(C):
            grad[ob2 + c] += z[c]
        for j in range(p):
            xij = X[i, j]
            for k in range(h):
                grad[j * h + k] += xij * dz1[k]
        for k in range(h):
            grad[ob1 + k] += dz1[k]

    loss /= n
    for j in range(grad.shape[0]):
        grad[j] /= n
    if l2 != 0.0:
        s = 0.0
        for j in range(params.shape[0]):
            s += params[j] * params[j]
            grad[j] += l2 * params[j]
        loss += 0.5 * l2 * s
    return loss, grad_arr, ps_arr


def quadratic_loss_grad(double[::1] params, Py_ssize_t n_batch, double l2):
    cdef Py_ssize_t j
    cdef double s = 0.0
    grad_arr = np.empty(params.shape[0], dtype=np.float64)
    cdef double[::1] grad = grad_arr
    for j in range(params.shape[0]):
        s += params[j] * params[j]
        grad[j] = (1.0 + l2) * params[j]
    ps_arr = np.full(n_batch, 0.5 * s)
    return 0.5 * s * (1.0 + l2), grad_arr, ps_arr
