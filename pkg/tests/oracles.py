"""Independent reference computations used only by the tests."""

import math

import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def straight_line_logits(stack, x, eps=1e-5):
    """Per-example, loop-based reimplementation of the adapter stack forward pass."""
    rows = []
    for v in np.asarray(x, dtype=float):
        v = v.copy()
        for layer in stack.layers:
            pre = layer.base_weight.T @ v + layer.base_bias
            mu = pre.mean()
            var = ((pre - mu) ** 2).mean()
            v = (pre - mu) / math.sqrt(var + eps) * layer.norm_scale + layer.norm_shift
            hidden = np.maximum(layer.down_weight.T @ v + layer.down_bias, 0.0)
            v = v + layer.up_weight.T @ hidden + layer.up_bias
        rows.append(stack.head_weight @ v + stack.head_bias)
    return np.array(rows)


def final_features(stack, x, eps=1e-5):
    """Top-layer features (input to the head) for one example."""
    v = np.asarray(x, dtype=float).copy()
    for layer in stack.layers:
        pre = layer.base_weight.T @ v + layer.base_bias
        mu = pre.mean()
        v = (pre - mu) / math.sqrt(((pre - mu) ** 2).mean() + eps) * layer.norm_scale + layer.norm_shift
        v = v + layer.up_weight.T @ np.maximum(layer.down_weight.T @ v + layer.down_bias, 0.0) + layer.up_bias
    return v


def exact_head_trace(stack, x):
    """sum_y p(y|x) ||d log p(y|x) / d head||^2 by enumeration.

    For a softmax head z = W f + b, d log p_y / d W = (e_y - p) f^T and
    d log p_y / d b = e_y - p.
    """
    f = final_features(stack, x)
    z = stack.head_weight @ f + stack.head_bias
    p = np.exp(z - z.max())
    p /= p.sum()
    total = 0.0
    for y in range(len(p)):
        r = -p.copy()
        r[y] += 1.0
        total += p[y] * (r @ r) * (f @ f + 1.0)
    return total


def brute_force_width(values, alpha):
    """Longest contiguous interval containing the (first) peak with all values >= alpha * peak."""
    i_peak = int(np.argmax(values))
    thresh = alpha * values[i_peak]
    best = 0
    n = len(values)
    for lo in range(n):
        for hi in range(lo, n):
            if lo <= i_peak <= hi and all(v >= thresh for v in values[lo : hi + 1]):
                best = max(best, hi - lo + 1)
    return best


def average_ranks(xs):
    ranks = [0.0] * len(xs)
    for i, x in enumerate(xs):
        less = sum(1 for y in xs if y < x)
        equal = sum(1 for y in xs if y == x)
        ranks[i] = less + (equal + 1) / 2
    return ranks


def spearman_oracle(xs, ys):
    rx, ry = average_ranks(xs), average_ranks(ys)
    n = len(xs)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    vy = math.sqrt(sum((b - my) ** 2 for b in ry))
    return cov / (vx * vy)


def rel_error(a, b, floor=1e-6):
    """Norm-wise relative error with an absolute floor for vanishing gradients."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numpy_loss(stack, x, labels, eps=1e-5):
    """Tape-free batched forward plus mean NLL, used as the finite-difference target."""
    v = x
    for layer in stack.layers:
        pre = v @ layer.base_weight + layer.base_bias
        c = pre - pre.mean(axis=1, keepdims=True)
        v = c / np.sqrt((c * c).mean(axis=1, keepdims=True) + eps) * layer.norm_scale + layer.norm_shift
        v = v + np.maximum(v @ layer.down_weight + layer.down_bias, 0.0) @ layer.up_weight + layer.up_bias
    z = v @ stack.head_weight.T + stack.head_bias
    z = z - z.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-lp[np.arange(len(labels)), labels].mean())
