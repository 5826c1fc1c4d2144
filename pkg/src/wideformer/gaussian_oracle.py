"""Gaussian expectations needed by the infinite-width recursions.

Two kinds of integrals show up:

* pair integrals ``<f(w1) g(w2)>`` under a mean-zero bivariate Gaussian,
  done by tensor-product Gauss-Hermite quadrature (ReLU and its step
  derivative use the exact arc-cosine formulas instead, since quadrature
  converges slowly across a kink), and
* moments of the softmax attention matrix when the pre-softmax logits are a
  mean-zero Gaussian vector with covariance ``A = C_Q C_K F (x) F``.  These
  have no closed form and are estimated by Monte-Carlo with reported
  standard errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .activations import resolve
from .pair_kernel import PairKernel
from .rng import stream

DEFAULT_ORDER = 64
DEFAULT_MOMENT_SAMPLES = 4096
MASKINGS = ("bidirectional", "masked")

# ---------------------------------------------------------------------------
# Pair integrals
# ---------------------------------------------------------------------------

_RULES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order < 1:
        raise ValueError(f"quadrature order must be positive, got {order}")
    if order not in _RULES:
        x, w = hermegauss(order)
        _RULES[order] = (x, w / w.sum())
    return _RULES[order]


def _check_cov(K11: np.ndarray, K12: np.ndarray, K22: np.ndarray) -> None:
    if np.any(K11 < 0) or np.any(K22 < 0):
        raise ValueError("variances must be non-negative")
    bound = np.sqrt(K11 * K22)
    if np.any(np.abs(K12) > bound * (1 + 1e-9) + 1e-300):
        raise ValueError("covariance violates Cauchy-Schwarz: |K12| > sqrt(K11 K22)")


def _pair_values(f, g, K11, K12, K22, order):
    """Vectorized core over 1-D arrays of covariance entries."""
    x, w = _rule(order)
    s1 = np.sqrt(K11)
    s2 = np.sqrt(K22)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(s1 * s2 > 0, K12 / (s1 * s2), 0.0)
    rho = np.clip(rho, -1.0, 1.0)
    out = np.empty(K11.shape)
    # degenerate correlation: one-dimensional rule along the shared direction
    one_d = np.abs(rho) >= 1.0 - 1e-14
    if np.any(one_d):
        a = s1[one_d, None] * x[None, :]
        b = (rho[one_d] * s2[one_d])[:, None] * x[None, :]
        out[one_d] = (f(a) * g(b)) @ w
    rest = ~one_d
    if np.any(rest):
        idx = np.flatnonzero(rest)
        for start in range(0, idx.size, 256):
            sel = idx[start:start + 256]
            w1 = s1[sel, None] * x[None, :]
            r = rho[sel, None, None]
            w2 = s2[sel, None, None] * (r * x[None, :, None] + np.sqrt(1.0 - r * r) * x[None, None, :])
            fv = f(w1)
            gv = g(w2)
            out[sel] = np.einsum("ei,eij,i,j->e", fv, gv, w, w)
    return out


def _relu_relu(s1, s2, rho):
    return s1 * s2 * (np.sqrt(1.0 - rho * rho) + (np.pi - np.arccos(rho)) * rho) / (2 * np.pi)


def _step_step(s1, s2, rho):
    return (np.pi - np.arccos(rho)) / (2 * np.pi)


def _relu_step(s1, s2, rho):
    return s1 * (1.0 + rho) / (2 * np.sqrt(2 * np.pi))


def _step_relu(s1, s2, rho):
    return _relu_step(s2, s1, rho)


ARC_COSINE = {
    ("relu", "relu"): _relu_relu,
    ("relu'", "relu'"): _step_step,
    ("relu", "relu'"): _relu_step,
    ("relu'", "relu"): _step_relu,
}


def _dispatch(f, g, K11, K12, K22, order, exact=True):
    """Closed form where one is known and both variances are positive, quadrature elsewhere."""
    form = ARC_COSINE.get((f, g)) if exact and isinstance(f, str) and isinstance(g, str) else None
    if form is None:
        return _pair_values(resolve(f), resolve(g), K11, K12, K22, order)
    out = np.empty(K11.shape)
    live = (K11 > 0) & (K22 > 0)
    if np.any(live):
        s1, s2 = np.sqrt(K11[live]), np.sqrt(K22[live])
        rho = np.clip(K12[live] / (s1 * s2), -1.0, 1.0)
        out[live] = form(s1, s2, rho)
    if not np.all(live):
        dead = ~live
        out[dead] = _pair_values(resolve(f), resolve(g), K11[dead], K12[dead], K22[dead], order)
    return out


def gauss_pair_expect(
    f: str | Callable,
    g: str | Callable,
    K11: float,
    K12: float,
    K22: float,
    order: int = DEFAULT_ORDER,
    exact: bool = True,
) -> float:
    """``E[f(w1) g(w2)]`` for ``(w1, w2) ~ N(0, [[K11, K12], [K12, K22]])``.

    ``f`` and ``g`` are activation tags (``"relu"``, ``"gelu'"``...) or
    vectorized callables.  ``exact=False`` forces quadrature even where a
    closed form exists.
    """
    a = np.array([K11], dtype=float)
    b = np.array([K12], dtype=float)
    c = np.array([K22], dtype=float)
    _check_cov(a, b, c)
    return float(_dispatch(f, g, a, b, c, order, exact)[0])


def gauss_pair_matrix(
    f: str | Callable, g: str | Callable, K: np.ndarray, order: int = DEFAULT_ORDER, exact: bool = True
) -> np.ndarray:
    """Entrywise ``<f g>`` on the 2x2 restriction of ``K`` to every index pair.

    Only the upper triangle is integrated when ``f`` and ``g`` coincide;
    each entry is computed independently, so the result does not depend on
    evaluation order.
    """
    K = np.asarray(K, dtype=float)
    P = K.shape[0]
    d = np.diagonal(K)
    fc, gc = resolve(f), resolve(g)
    symmetric = f == g if isinstance(f, str) and isinstance(g, str) else fc is gc
    if symmetric:
        iu, ju = np.triu_indices(P)
    else:
        iu, ju = np.indices((P, P)).reshape(2, -1)
    K11, K12, K22 = d[iu], K[iu, ju], d[ju]
    _check_cov(K11, K12, K22)
    vals = _dispatch(f, g, K11, K12, K22, order, exact)
    out = np.empty((P, P))
    out[iu, ju] = vals
    if symmetric:
        out[ju, iu] = vals
    return out


# ---------------------------------------------------------------------------
# Query-key logits and attention moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttnKernel:
    """Covariance of the logits over the flattened index ``(alpha, t, t')``."""

    matrix: np.ndarray
    B: int
    T: int

    @property
    def D(self) -> int:
        return self.B * self.T * self.T


def qk_covariance(F: PairKernel, C_Q: float, C_K: float) -> AttnKernel:
    """``A[(a;t,t'),(b;u,u')] = C_Q C_K F[(a;t),(b;u)] F[(a;t'),(b;u')]`` (one head)."""
    F4 = F.block4()
    A = C_Q * C_K * np.einsum("atbu,asbv->atsbuv", F4, F4)
    D = F.B * F.T * F.T
    return AttnKernel(A.reshape(D, D), F.B, F.T)


def psd_repair(A: np.ndarray) -> np.ndarray:
    """Symmetrize and lift slightly negative eigenvalues.

    Eigenvalues below ``-1e-10 * ||A||`` are left alone (the matrix is then
    genuinely indefinite and factoring it will fail loudly); anything between
    that threshold and zero is clipped up to ``1e-12 * ||A||``.
    """
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    norm = np.linalg.norm(A, 2) if A.size else 0.0
    vals, vecs = np.linalg.eigh(A)
    floor = 1e-12 * norm
    fixed = np.where((vals < floor) & (vals >= -1e-10 * norm), floor, vals)
    if np.array_equal(fixed, vals):
        return A
    return (vecs * fixed) @ vecs.T


def symmetric_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric factor ``S`` with ``S @ S = A`` for a PSD ``A``."""
    vals, vecs = np.linalg.eigh(A)
    norm = max(abs(vals).max(initial=0.0), 1e-300)
    if vals.size and vals.min() < -1e-10 * norm:
        raise np.linalg.LinAlgError(
            f"logit covariance is not positive semidefinite (min eigenvalue {vals.min():.3e})"
        )
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def softmax_rows(logits: np.ndarray, masking: str = "bidirectional") -> np.ndarray:
    """Softmax over the last axis; ``masked`` zeroes entries with t' > t."""
    if masking not in MASKINGS:
        raise ValueError(f"masking must be one of {MASKINGS}, got {masking!r}")
    x = np.array(logits, dtype=float)
    if masking == "masked":
        T = x.shape[-1]
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        x = np.where(future, -np.inf, x)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian_rows(omega: np.ndarray) -> np.ndarray:
    """``J[..., t, t', t''] = dOmega[t, t'] / dlogit[t, t''] = Omega[t,t'](delta[t',t''] - Omega[t,t''])``.

    Derivatives with respect to logits in a different row vanish and are not
    stored.  Masked entries have ``Omega = 0`` and hence zero derivative.
    """
    T = omega.shape[-1]
    eye = np.eye(T)
    return omega[..., :, :, None] * (eye - omega[..., :, None, :])


@dataclass(frozen=True)
class AttnMoments:
    """Monte-Carlo moments of the attention matrix of one head.

    ``omega2[a, t, t', b, u, u'] = E[Omega^a_{t t'} Omega^b_{u u'}]`` and
    ``domega2[a, t, t', s, b, u, u', v] = E[J^a_{t t' s} J^b_{u u' v}]`` with
    ``J`` the row-wise softmax Jacobian.  ``*_se`` are per-entry standard
    errors of the sample means.
    """

    omega2: np.ndarray
    omega2_se: np.ndarray
    domega2: np.ndarray | None
    domega2_se: np.ndarray | None
    n_samples: int
    masking: str
    B: int
    T: int


def sample_logits(A: AttnKernel, n: int, seed: int, *index: int) -> np.ndarray:
    """``n`` draws of the logits, shape ``(n, B, T, T)``."""
    S = symmetric_sqrt(psd_repair(A.matrix))
    z = stream(seed, "attention-logits", *index).standard_normal((n, A.D))
    return (z @ S).reshape(n, A.B, A.T, A.T)


def attention_moments(
    A: AttnKernel,
    masking: str = "bidirectional",
    n_samples: int = DEFAULT_MOMENT_SAMPLES,
    seed: int = 0,
    derivatives: bool = True,
    stream_index: tuple[int, ...] = (),
    chunk: int = 1024,
) -> AttnMoments:
    """Estimate ``E[Omega Omega]`` and ``E[J J]`` for Gaussian logits with covariance ``A``.

    Draws are generated in fixed chunks, each from its own keyed stream, and
    accumulated in chunk order, so the result is bit-identical for a given
    seed no matter how the work is scheduled.
    """
    if masking not in MASKINGS:
        raise ValueError(f"masking must be one of {MASKINGS}, got {masking!r}")
    if n_samples < 2:
        raise ValueError("need at least two samples to report standard errors")
    B, T = A.B, A.T
    S = symmetric_sqrt(psd_repair(A.matrix))
    d1 = B * T * T
    d2 = B * T ** 3
    m1 = np.zeros((d1, d1))
    q1 = np.zeros((d1, d1))
    m2 = np.zeros((d2, d2)) if derivatives else None
    q2 = np.zeros((d2, d2)) if derivatives else None
    done = 0
    for c, start in enumerate(range(0, n_samples, chunk)):
        size = min(chunk, n_samples - start)
        z = stream(seed, "attention-logits", *stream_index, c).standard_normal((size, A.D))
        logits = (z @ S).reshape(size, B, T, T)
        omega = softmax_rows(logits, masking)
        flat = omega.reshape(size, d1)
        m1 += flat.T @ flat
        sq = flat * flat
        q1 += sq.T @ sq
        if derivatives:
            jac = softmax_jacobian_rows(omega).reshape(size, d2)
            m2 += jac.T @ jac
            jsq = jac * jac
            q2 += jsq.T @ jsq
        done += size
    mean1 = m1 / done
    se1 = np.sqrt(np.clip(q1 / done - mean1 ** 2, 0.0, None) / (done - 1))
    shape1 = (B, T, T, B, T, T)
    if derivatives:
        mean2 = m2 / done
        se2 = np.sqrt(np.clip(q2 / done - mean2 ** 2, 0.0, None) / (done - 1))
        shape2 = (B, T, T, T, B, T, T, T)
        mean2, se2 = mean2.reshape(shape2), se2.reshape(shape2)
    else:
        mean2 = se2 = None
    return AttnMoments(mean1.reshape(shape1), se1.reshape(shape1), mean2, se2, done, masking, B, T)


# ---------------------------------------------------------------------------
# Wick pairings
# ---------------------------------------------------------------------------


def wick_even_moment(A: np.ndarray | AttnKernel, indices: list[int] | tuple[int, ...]) -> float:
    """``E[x_{i1} ... x_{ik}]`` for ``x ~ N(0, A)``: the sum over perfect pairings.

    Odd counts give zero.  The recursion pairs the first index with each of
    the others in turn, which enumerates all ``(2m-1)!!`` pairings.
    """
    M = A.matrix if isinstance(A, AttnKernel) else np.asarray(A, dtype=float)
    idx = list(indices)
    if len(idx) % 2:
        return 0.0

    def rec(rest: list[int]) -> float:
        if not rest:
            return 1.0
        first, others = rest[0], rest[1:]
        total = 0.0
        for k, j in enumerate(others):
            total += M[first, j] * rec(others[:k] + others[k + 1:])
        return total

    return float(rec(idx))


def pairings_count(m: int) -> int:
    """``(2m-1)!!``."""
    out = 1
    for k in range(1, 2 * m, 2):
        out *= k
    return out
