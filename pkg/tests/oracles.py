"""Independent reference computations used as test oracles.

Deliberately written as plain Python loops so they share no code path with
the vectorised implementations under test.
"""

import math

import numpy as np


def two_pass_channel_stats(img):
    """Per-channel mean and population std of one [C, H, W] image."""
    C, H, W = img.shape
    means, stds = [], []
    for c in range(C):
        vals = [float(img[c, h, w]) for h in range(H) for w in range(W)]
        m = math.fsum(vals) / len(vals)
        var = math.fsum((v - m) ** 2 for v in vals) / len(vals)
        means.append(m)
        stds.append(math.sqrt(var))
    return np.array(means), np.array(stds)


def loop_dataset_stats(images):
    per = [two_pass_channel_stats(img) for img in images]
    C = images.shape[1]
    mean = [math.fsum(p[0][c] for p in per) / len(per) for c in range(C)]
    std = [math.fsum(p[1][c] for p in per) / len(per) for c in range(C)]
    return np.array(mean), np.array(std)


def loop_average_stats(pairs):
    """Elementwise average of a list of (mean, std) pairs."""
    C = len(pairs[0][0])
    mean = [math.fsum(p[0][c] for p in pairs) / len(pairs) for c in range(C)]
    std = [math.fsum(p[1][c] for p in pairs) / len(pairs) for c in range(C)]
    return np.array(mean), np.array(std)


def loop_weighted_average(vectors, counts):
    total = sum(counts)
    n = len(vectors[0])
    return np.array([math.fsum(counts[k] / total * vectors[k][i] for k in range(len(vectors))) for i in range(n)])


def central_differences(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at flat vector ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def max_relative_error(a, b, floor=1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def brute_accuracy(logits, labels):
    hits = 0
    for row, y in zip(logits, labels):
        best = 0
        for j in range(len(row)):
            if row[j] > row[best]:
                best = j
        hits += best == y
    return hits / len(labels)
