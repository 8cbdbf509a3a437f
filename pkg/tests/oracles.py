"""Reference implementations used only by the tests.

Each one is written from the definition, in the slowest obvious way, and
shares no code with the package.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def fd_gradients(loss_fn, arrays, eps=1e-5):
    """Central differences of a scalar function of several float arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            up = loss_fn()
            a[idx] = orig - eps
            down = loss_fn()
            a[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Worst norm-wise relative error over a list of gradient arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


def brute_auc(scores, labels) -> float:
    """Pairwise Mann-Whitney count in exact rational arithmetic."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                total += 1
            elif p == n:
                total += Fraction(1, 2)
    return float(total / (len(pos) * len(neg)))


def standardize(train, other=None):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    keep = np.ptp(train, axis=0) > 0
    out = [(train[:, keep] - mu[keep]) / sd[keep]]
    if other is not None:
        out.append((other[:, keep] - mu[keep]) / sd[keep])
    return keep, out


def irls_logistic(X, y, reg, iters=100):
    """Penalised logistic regression by iteratively reweighted least squares.

    Objective: mean log-loss + reg/2 * |w|^2, intercept unpenalised, on
    standardised columns (constant columns removed and given weight 0).
    """
    keep, (Z,) = standardize(np.asarray(X, float))
    n, d = Z.shape
    A = np.hstack([np.ones((n, 1)), Z])
    P = np.diag([0.0] + [n * reg] * d)
    beta = np.zeros(d + 1)
    for _ in range(iters):
        eta = A @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(p * (1 - p), 1e-12, None)
        z = eta + (y - p) / w
        new = np.linalg.solve(A.T @ (w[:, None] * A) + P, A.T @ (w * z))
        if np.max(np.abs(new - beta)) < 1e-13:
            beta = new
            break
        beta = new
    coef = np.zeros(X.shape[1])
    coef[keep] = beta[1:]
    return coef, beta[0]


def brute_knn_scores(train, labels, queries, k):
    """Positive fraction among the k nearest rows; ties go to the lower training index."""
    out = []
    for q in queries:
        d = [(float(np.sum((q - t) ** 2)), i) for i, t in enumerate(train)]
        d.sort()
        out.append(sum(labels[i] for _, i in d[:k]) / k)
    return np.array(out)


def linearly_separable(X, y) -> bool:
    """LP feasibility of y_i (w.x_i + b) >= 1."""
    from scipy.optimize import linprog

    s = np.where(np.asarray(y) == 1, 1.0, -1.0)
    n, d = X.shape
    A = -s[:, None] * np.hstack([X, np.ones((n, 1))])
    res = linprog(np.zeros(d + 1), A_ub=A, b_ub=-np.ones(n), bounds=[(None, None)] * (d + 1), method="highs")
    return res.status == 0
