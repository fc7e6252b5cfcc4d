"""Brute-force reference implementations used to check the package.

Nothing here imports from ``prefscope``; each oracle takes the slow,
obviously-correct route (generic optimizers, explicit loops, closed forms).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, stats


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logistic_mle(y, X):
    """Unpenalized logistic MLE (intercept first) via BFGS on the negative log-likelihood."""
    X1 = np.column_stack([np.ones(len(y)), X])

    def nll(b):
        eta = X1 @ b
        return float(np.sum(np.logaddexp(0, eta) - y * eta))

    def grad(b):
        return X1.T @ (sigmoid(X1 @ b) - y)

    res = optimize.minimize(nll, np.zeros(X1.shape[1]), jac=grad, method="BFGS",
                            options={"gtol": 1e-10, "maxiter": 10000})
    return res.x


def auc_pairwise(scores, y):
    """AUC by comparing every positive with every negative (ties count one half)."""
    scores = np.asarray(scores, float)
    y = np.asarray(y).astype(bool)
    pos, neg = scores[y], scores[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def population_standardize(x):
    x = np.asarray(x, float)
    n = x.size
    mean = sum(x) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in x) / n)
    return (x - mean) / sd


def group_rate_difference(D, y):
    """Raw win-rate difference between D=1 and D=0 rows."""
    D = np.asarray(D, bool)
    y = np.asarray(y, float)
    return float(y[D].mean() - y[~D].mean())


def reml_tau2_grid(b, v, n_grid=200001):
    """REML tau^2 by exhaustive evaluation on a fine grid over [0, 10 var(b)]."""
    b = np.asarray(b, float)
    v = np.asarray(v, float)
    grid = np.linspace(0, 10 * np.var(b), n_grid)
    W = 1.0 / (v[None, :] + grid[:, None])
    mu = (W * b).sum(axis=1) / W.sum(axis=1)
    ll = -0.5 * (np.log(v[None, :] + grid[:, None]).sum(axis=1) + np.log(W.sum(axis=1))
                 + (W * (b[None, :] - mu[:, None]) ** 2).sum(axis=1))
    return float(grid[np.argmax(ll)])


def pm_tau2_bisect(b, v, iters=200):
    """Paule-Mandel tau^2 by plain bisection on Q(tau^2) - (n - 1)."""
    b = np.asarray(b, float)
    v = np.asarray(v, float)

    def q(t):
        w = 1 / (v + t)
        mu = (w * b).sum() / w.sum()
        return (w * (b - mu) ** 2).sum() - (b.size - 1)

    if q(0.0) <= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while q(hi) > 0:
        hi *= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if q(mid) > 0 else (lo, mid)
    return 0.5 * (lo + hi)


def bt_two_model_gap(wins, losses):
    """Closed-form two-model Bradley-Terry rating gap on the Elo scale."""
    return 400.0 * math.log10(wins / losses)


def bt_strengths_generic(models, results):
    """Bradley-Terry MLE via a generic optimizer; ``results`` are (a, b, score_a) triples."""
    idx = {m: i for i, m in enumerate(models)}
    a = np.array([idx[r[0]] for r in results])
    b = np.array([idx[r[1]] for r in results])
    s = np.array([r[2] for r in results], float)

    def nll(free):
        th = np.concatenate([[0.0], free])
        eta = th[a] - th[b]
        return float(np.sum(np.logaddexp(0, eta) - s * eta))

    res = optimize.minimize(nll, np.zeros(len(models) - 1), method="BFGS", options={"gtol": 1e-12})
    return np.concatenate([[0.0], res.x])


def topk_mask_bruteforce(A, n_keep):
    """Keep the ``n_keep`` largest |A| entries; ties resolved by lower flat index."""
    flat = np.abs(A).ravel()
    order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
    mask = np.zeros(flat.size, bool)
    mask[order[:n_keep]] = True
    return mask.reshape(A.shape)


def matryoshka_loss(X, W_enc, W_dec, mask, prefix):
    """Prefix-plus-full reconstruction MSE for a frozen TopK support (loop-free but explicit)."""
    A = X @ W_enc.T
    Z = np.where(mask, A, 0.0)
    Zp = Z.copy()
    Zp[:, prefix:] = 0.0
    full = Z @ W_dec.T
    pre = Zp @ W_dec.T
    return float(np.mean((X - pre) ** 2) + np.mean((X - full) ** 2))


def null_pearson_abs_quantile(n=300, sims=1000, q=0.99, seed=0):
    rng = np.random.default_rng(seed)
    rs = []
    for _ in range(sims):
        z = rng.choice([-2.0, -1.0, 1.0, 2.0], size=n) * rng.uniform(0.5, 1.5, size=n)
        v = rng.integers(-1, 2, size=n)
        rs.append(abs(stats.pearsonr(z, v)[0]))
    return float(np.quantile(rs, q))


def normal_fraction_reversed(beta, tau):
    return float(stats.norm.cdf(-abs(beta) / tau))
