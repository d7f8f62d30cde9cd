"""Slow, obviously-correct reference implementations used only by the tests.

None of these share code with the package paths they check.
"""

import math
from collections import deque

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def conv2d_loops(x, w, b, stride=1):
    n, h, wd, c = x.shape
    kh, kw, _, f = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, ho, wo, f))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(f):
                    acc = float(b[o])
                    for di in range(kh):
                        for dj in range(kw):
                            for ch in range(c):
                                acc += float(x[s, i * stride + di, j * stride + dj, ch]) * float(w[di, dj, ch, o])
                    out[s, i, j, o] = acc
    return out


def maxpool_loops(x, pool, stride):
    n, h, w, c = x.shape
    ho, wo = (h - pool) // stride + 1, (w - pool) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    out[s, i, j, ch] = max(float(x[s, i * stride + a, j * stride + bb, ch])
                                           for a in range(pool) for bb in range(pool))
    return out


def central_differences(f, x, eps):
    """Gradient of scalar ``f`` at array ``x`` by central differences (same dtype as x)."""
    x = x.copy()
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(np.sum(f(x)))
        flat[i] = old - eps
        fm = float(np.sum(f(x)))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(analytic, numeric):
    """Largest absolute deviation, relative to the largest numeric gradient entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def largest_component_flood_fill(mask):
    """Boolean mask of the largest 8-connected True region, by BFS."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    best = []
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or seen[si, sj]:
                continue
            comp = []
            q = deque([(si, sj)])
            seen[si, sj] = True
            while q:
                i, j = q.popleft()
                comp.append((i, j))
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        a, b = i + di, j + dj
                        if 0 <= a < h and 0 <= b < w and mask[a, b] and not seen[a, b]:
                            seen[a, b] = True
                            q.append((a, b))
            if len(comp) > len(best):
                best = comp
    out = np.zeros_like(mask, dtype=bool)
    for i, j in best:
        out[i, j] = True
    return out


def metrics_per_sample(true, pred, k):
    """Accuracy, balanced accuracy, weighted and macro P/R/F1 by counting samples."""
    n = len(true)
    correct = sum(1 for t, p in zip(true, pred) if t == p)
    prec, rec, f1, support = [], [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        pp = sum(1 for p in pred if p == c)
        sup = sum(1 for t in true if t == c)
        pr = tp / pp if pp else 0.0
        rc = tp / sup if sup else 0.0
        prec.append(pr)
        rec.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
        support.append(sup)
    present = [r for r, s in zip(rec, support) if s > 0]
    return {
        "accuracy": correct / n,
        "balanced_accuracy": sum(present) / len(present),
        "precision": sum(p * s for p, s in zip(prec, support)) / n,
        "recall": sum(r * s for r, s in zip(rec, support)) / n,
        "f1": sum(f * s for f, s in zip(f1, support)) / n,
        "macro_precision": sum(prec) / k,
        "macro_recall": sum(rec) / k,
        "macro_f1": sum(f1) / k,
    }


def kl_loops(p, q, floor=1e-12):
    n = p.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                a, b = max(p[i, j], floor), max(q[i, j], floor)
                total += a * math.log(a / b)
    return total


def perplexity_of_row(p_row):
    h = -sum(v * math.log2(v) for v in p_row if v > 0)
    return 2.0 ** h


def adam_scalar(grad_fn, theta, lr, steps, b1=0.9, b2=0.999, eps=1e-7):
    """Plain-float Adam trajectory."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        path.append(theta)
    return path


def shapley_by_permutations(value_fn, n):
    """Average marginal contribution over all n! orderings (n <= 7)."""
    from itertools import permutations

    phi = np.zeros(n)
    count = 0
    for order in permutations(range(n)):
        coal = np.zeros(n, dtype=bool)
        prev = value_fn(coal.copy())
        for i in order:
            coal[i] = True
            cur = value_fn(coal.copy())
            phi[i] += cur - prev
            prev = cur
        count += 1
    return phi / count
