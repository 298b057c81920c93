"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and return values mirror the compiled module exactly so either
can sit behind ``incseg.kernels``.
"""
import numpy as np


def hard_ce(probs, labels, in_set, ignore, floor):
    P, C = probs.shape
    valid = (labels != ignore) & (labels >= 0) & (labels < C)
    valid[valid] = in_set[labels[valid]].astype(bool)
    n = int(valid.sum())
    grad = np.zeros((P, C), dtype=np.float64)
    if n == 0:
        return 0.0, grad, 0
    rows = np.flatnonzero(valid)
    y = labels[rows]
    p = np.maximum(probs[rows, y], floor)
    grad[rows] = probs[rows]
    grad[rows, y] -= 1.0
    grad /= n
    return float(-np.log(p).sum() / n), grad, n


def soft_ce(probs, targets, channels, mask, floor):
    P, C = probs.shape
    sel = mask.astype(bool)
    n = int(sel.sum())
    grad = np.zeros((P, C), dtype=np.float64)
    if n == 0:
        return 0.0, grad, 0
    q = targets[sel]
    p = np.maximum(probs[sel][:, channels], floor)
    total = -(q * np.log(p)).sum()
    g = probs[sel] * q.sum(axis=1, keepdims=True)
    np.subtract.at(g, (slice(None), channels), q)
    grad[sel] = g / n
    return float(total / n), grad, n


def confusion(counts, gt_rows, pred_rows):
    keep = gt_rows >= 0
    n = counts.shape[0]
    flat = gt_rows[keep] * n + pred_rows[keep]
    counts += np.bincount(flat, minlength=n * n).reshape(n, n)


def gated_argmax(probs, novel, tau, ignore):
    best = np.argmax(probs, axis=1)  # first maximum on ties
    top = probs[np.arange(probs.shape[0]), best]
    keep = novel[best].astype(bool) & (top >= tau)
    return np.where(keep, best, ignore).astype(np.int64)
