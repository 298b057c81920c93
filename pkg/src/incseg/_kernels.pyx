# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels.

Every function here has a line-for-line numpy twin in ``_kernels_py``; the
two must agree to floating-point rounding. Inputs are assumed validated and
C-contiguous (the wrappers in ``incseg.kernels`` take care of that).
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


def hard_ce(const double[:, ::1] probs, const cnp.int64_t[::1] labels,
            const cnp.uint8_t[::1] in_set, cnp.int64_t ignore, double floor):
    """Masked hard-label cross-entropy and its gradient w.r.t. logits.

    Returns ``(loss, grad, count)`` where ``count`` is the number of pixels
    whose label lies in ``in_set``.
    """
    cdef Py_ssize_t P = probs.shape[0]
    cdef Py_ssize_t C = probs.shape[1]
    cdef Py_ssize_t l, c, n = 0
    cdef cnp.int64_t y
    cdef double total = 0.0, p, inv
    grad_arr = np.zeros((P, C), dtype=np.float64)
    cdef double[:, ::1] g = grad_arr

    for l in range(P):
        y = labels[l]
        if y == ignore or y < 0 or y >= C or not in_set[y]:
            continue
        n += 1
        p = probs[l, y]
        if p < floor:
            p = floor
        total -= log(p)
        for c in range(C):
            g[l, c] = probs[l, c]
        g[l, y] -= 1.0

    if n == 0:
        return 0.0, grad_arr, 0
    inv = 1.0 / n
    for l in range(P):
        for c in range(C):
            g[l, c] *= inv
    return total * inv, grad_arr, n


def soft_ce(const double[:, ::1] probs, const double[:, ::1] targets,
            const cnp.int64_t[::1] channels, const cnp.uint8_t[::1] mask,
            double floor):
    """Soft-target cross-entropy over a channel subset and a pixel subset.

    ``targets[l, k]`` weighs channel ``channels[k]`` of pixel ``l``. Used for
    distillation (teacher probabilities over old channels) and for soft
    pseudo-labels.
    """
    cdef Py_ssize_t P = probs.shape[0]
    cdef Py_ssize_t C = probs.shape[1]
    cdef Py_ssize_t K = channels.shape[0]
    cdef Py_ssize_t l, c, k, n = 0
    cdef double total = 0.0, p, q, s, inv
    grad_arr = np.zeros((P, C), dtype=np.float64)
    cdef double[:, ::1] g = grad_arr

    for l in range(P):
        if not mask[l]:
            continue
        n += 1
        s = 0.0
        for k in range(K):
            c = channels[k]
            q = targets[l, k]
            p = probs[l, c]
            if p < floor:
                p = floor
            total -= q * log(p)
            s += q
            g[l, c] -= q
        for c in range(C):
            g[l, c] += probs[l, c] * s

    if n == 0:
        return 0.0, grad_arr, 0
    inv = 1.0 / n
    for l in range(P):
        if mask[l]:
            for c in range(C):
                g[l, c] *= inv
    return total * inv, grad_arr, n


def confusion(cnp.int64_t[:, ::1] counts, const cnp.int64_t[::1] gt_rows,
              const cnp.int64_t[::1] pred_rows):
    """Add one count per pixel at ``counts[gt, pred]``; ``gt < 0`` is skipped."""
    cdef Py_ssize_t P = gt_rows.shape[0]
    cdef Py_ssize_t l
    cdef cnp.int64_t g
    for l in range(P):
        g = gt_rows[l]
        if g < 0:
            continue
        counts[g, pred_rows[l]] += 1


def gated_argmax(const double[:, ::1] probs, const cnp.uint8_t[::1] novel,
                 double tau, cnp.int64_t ignore):
    """Per-pixel argmax (lowest index wins ties), kept only if novel and >= tau."""
    cdef Py_ssize_t P = probs.shape[0]
    cdef Py_ssize_t C = probs.shape[1]
    cdef Py_ssize_t l, c, best
    cdef double top
    out_arr = np.empty(P, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr

    for l in range(P):
        best = 0
        top = probs[l, 0]
        for c in range(1, C):
            if probs[l, c] > top:
                top = probs[l, c]
                best = c
        if novel[best] and top >= tau:
            out[l] = best
        else:
            out[l] = ignore
    return out_arr
