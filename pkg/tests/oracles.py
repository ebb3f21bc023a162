"""Scalar brute-force reference implementations, written without the package's vectorised code."""

import math

import numpy as np


def weight_matrix(bits):
    h, w = len(bits), len(bits[0])
    inside = sum(1 for i in range(h) for j in range(w) if bits[i][j])
    return [[h * w / inside if bits[i][j] else 1.0 for j in range(w)] for i in range(h)]


def masked_loss(pred, truth, weights):
    h, w, c = len(pred), len(pred[0]), len(pred[0][0])
    total = 0.0
    for i in range(h):
        for j in range(w):
            sq = 0.0
            for k in range(c):
                sq += (pred[i][j][k] - truth[i][j][k]) ** 2
            total += weights[i][j] * sq / c
    return total / (h * w)


def reward_mm(pred, truth, bits):
    h, w, c = len(pred), len(pred[0]), len(pred[0][0])
    total, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            if bits[i][j]:
                total += sum((pred[i][j][k] - truth[i][j][k]) ** 2 for k in range(c)) / c
                n += 1
    return -total / n


def reward_total(r_ds, r_mm, lam):
    return (1.0 - lam) * r_ds + lam * r_mm


def advantages(rewards, floor=1e-6):
    n = len(rewards)
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    std = max(math.sqrt(var), floor)
    return [(r - mean) / std for r in rewards]


def clipped_surrogate(ratio, adv, eps):
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * adv, clipped * adv)


def gaussian_log_prob(x, mean, std):
    total = 0.0
    for xi, mi in zip(x, mean):
        total += -((xi - mi) ** 2) / (2 * std * std) - math.log(std) - 0.5 * math.log(2 * math.pi)
    return total


def _conv3x3_replicate(x, weight, bias):
    """``x``: (C, H, W); ``weight``: (O, C, 3, 3).  Cross-correlation with edge replication."""
    cin, h, w = x.shape
    out = np.zeros((weight.shape[0], h, w))
    for o in range(weight.shape[0]):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            ii = min(max(i + di - 1, 0), h - 1)
                            jj = min(max(j + dj - 1, 0), w - 1)
                            acc += weight[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def embed(patch, embedder):
    """Loop-level re-implementation of the frozen embedder's forward map for one ``(h, w, C)`` patch."""
    x = np.transpose(np.asarray(patch, dtype=np.float64), (2, 0, 1)) - 0.5
    n = len(embedder._weights)
    for i, (wt, b) in enumerate(zip(embedder._weights, embedder._biases)):
        x = _conv3x3_replicate(x, wt, b)
        if i < n - 1:
            x = np.maximum(x, 0.0)
    v = x.mean(axis=(1, 2)) + embedder._offset
    return v / math.sqrt(float(np.sum(v * v)))


def reward_ds(pred, truth, windows, embedder):
    dists = []
    for top, left, hh, ww in windows:
        a = embed(pred[top : top + hh, left : left + ww], embedder)
        b = embed(truth[top : top + hh, left : left + ww], embedder)
        dists.append(math.sqrt(sum((ai - bi) ** 2 for ai, bi in zip(a, b))))
    return -sum(dists) / len(dists)


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-300)
