"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package's numerical code; each function recomputes
its quantity from first principles with plain loops.
"""
import math

import numpy as np


def radius_query_brute(xyz, point, radius):
    out = []
    for i, p in enumerate(xyz):
        if math.dist(p, point) <= radius:
            out.append(i)
    return out


def mae_loop(pred, target):
    total = 0.0
    for p, t in zip(pred, target):
        total += abs(p - t)
    return total / len(pred)


def iou_brute(gt, pred, classes):
    """Per-class IoU by set counting, skipping void (0) ground truth."""
    pairs = [(g, p) for g, p in zip(gt, pred) if g != 0]
    out = {}
    for c in classes:
        tp = sum(1 for g, p in pairs if g == c and p == c)
        fp = sum(1 for g, p in pairs if g != c and p == c)
        fn = sum(1 for g, p in pairs if g == c and p != c)
        present = any(g == c for g, _ in pairs)
        out[c] = tp / (tp + fp + fn) if present else None
    vals = [v for v in out.values() if v is not None]
    mean = sum(vals) / len(vals) if vals else None
    return out, mean


def mlp_loss_loop(weights, biases, X, y):
    """tanh MLP with (pi/2)-scaled sigmoid output and MAE loss, one row at a time."""
    total = 0.0
    for x, t in zip(X, y):
        h = list(x)
        for w, b in zip(weights[:-1], biases[:-1]):
            h = [math.tanh(sum(h[i] * w[i][j] for i in range(len(h))) + b[j]) for j in range(len(b))]
        w, b = weights[-1], biases[-1]
        z = sum(h[i] * w[i][0] for i in range(len(h))) + b[0]
        total += abs(math.pi / 2 / (1 + math.exp(-z)) - t)
    return total / len(y)


def central_difference(f, theta, k, h):
    tp = theta.copy()
    tm = theta.copy()
    tp[k] += h
    tm[k] -= h
    return (f(tp) - f(tm)) / (2 * h)


def majority_filter_brute(labels, xyz, radius):
    out = []
    for i, p in enumerate(xyz):
        votes = {}
        for j, q in enumerate(xyz):
            if math.dist(p, q) <= radius:
                votes[labels[j]] = votes.get(labels[j], 0) + 1
        best = max(votes.values())
        winners = [k for k, v in votes.items() if v == best]
        out.append(winners[0] if len(winners) == 1 else labels[i])
    return out


def lstsq_poly(r, y, degree, w=None):
    """Weighted Vandermonde least squares, ascending coefficients."""
    r = np.asarray(r, float)
    y = np.asarray(y, float)
    w = np.ones_like(r) if w is None else np.asarray(w, float)
    V = np.vander(r, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V * w[:, None], y * w, rcond=None)
    return coef
