"""Independent reference computations the package is checked against.

Nothing here imports the package: plain Monte Carlo, brute-force pairing
enumeration and hand-evaluated formulas.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def mc_pair_expect(f, g, K11, K12, K22, n=1_000_000, seed=12345):
    """Mean and standard error of ``f(w1) g(w2)`` over ``n`` Gaussian draws."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(np.array([[K11, K12], [K12, K22]]) + 1e-15 * np.eye(2))
    w = rng.standard_normal((n, 2)) @ L.T
    v = f(w[:, 0]) * g(w[:, 1])
    return v.mean(), v.std(ddof=1) / math.sqrt(n)


def brute_wick(A, idx):
    """Sum over perfect pairings, enumerated from all permutations (slow, obviously correct)."""
    idx = list(idx)
    k = len(idx)
    if k % 2:
        return 0.0
    seen = set()
    total = 0.0
    for perm in itertools.permutations(range(k)):
        pairs = frozenset(frozenset((perm[2 * i], perm[2 * i + 1])) for i in range(k // 2))
        if pairs in seen:
            continue
        seen.add(pairs)
        term = 1.0
        for pr in pairs:
            a, b = tuple(pr)
            term *= A[idx[a], idx[b]]
        total += term
    return total


def arc_cosine_relu(K11, K12, K22):
    """``E[relu(w1) relu(w2)]`` from the degree-one arc-cosine kernel."""
    s = math.sqrt(K11 * K22)
    rho = max(-1.0, min(1.0, K12 / s))
    th = math.acos(rho)
    return s * (math.sin(th) + (math.pi - th) * math.cos(th)) / (2 * math.pi)


def relu(x):
    return np.maximum(x, 0.0)


def step(x):
    return (x > 0).astype(float)


def gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def numeric_softmax_jacobian(logits_row, h=1e-6):
    """Central differences of a softmax row."""
    T = logits_row.size

    def sm(x):
        e = np.exp(x - x.max())
        return e / e.sum()

    J = np.empty((T, T))
    for k in range(T):
        d = np.zeros(T)
        d[k] = h
        J[:, k] = (sm(logits_row + d) - sm(logits_row - d)) / (2 * h)
    return J
