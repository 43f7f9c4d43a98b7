"""Brute-force reference implementations used only by the tests."""

import itertools

import numpy as np


def sweep_thresholds(scores):
    u = sorted(set(float(s) for s in scores))
    mids = [(a + b) / 2.0 for a, b in zip(u[:-1], u[1:])]
    return [u[0]] + mids + [float(np.nextafter(u[-1], np.inf))]


def counts_at(scores, labels, t):
    attacks = [s for s, l in zip(scores, labels) if l == 0]
    lives = [s for s, l in zip(scores, labels) if l == 1]
    accepted = sum(1 for s in attacks if s >= t)
    rejected = sum(1 for s in lives if s < t)
    return accepted / len(attacks), rejected / len(lives)


def eer_threshold(scores, labels):
    best_t, best_gap = None, None
    for t in sweep_thresholds(scores):
        a, b = counts_at(scores, labels, t)
        gap = abs(a - b)
        if best_gap is None or gap < best_gap:
            best_t, best_gap = t, gap
    return best_t


def pairwise_auc(scores, labels):
    lives = [s for s, l in zip(scores, labels) if l == 1]
    attacks = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for a, b in itertools.product(lives, attacks):
        wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(lives) * len(attacks))


def conv2d_loops(x, w, b=None, theta=0.0, stride=1, padding=0):
    """Direct summation of y(p0) = sum w(pn) x(p0+pn) - theta x(p0) sum w(pn) + b."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((n, cout, oh, ow))
    c = k // 2
    for bi in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        centre = xp[bi, ci, i * stride + c, j * stride + c]
                        for di in range(k):
                            for dj in range(k):
                                acc += w[o, ci, di, dj] * (xp[bi, ci, i * stride + di, j * stride + dj] - theta * centre)
                    y[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return y


def central_diff_grad(f, x, eps=1e-6):
    """Numerical gradient of scalar f at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
