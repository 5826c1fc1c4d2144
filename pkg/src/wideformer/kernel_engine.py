"""Infinite-width preactivation kernels, block by block.

At infinite width every block's preactivations are Gaussian and independent
across embedding channels, with a covariance ``G`` over (sample, token)
pairs.  The recursion only needs three ingredients: layer norm turns ``G``
into a correlation-like kernel ``F``; an MHSA block adds attention-weighted
averages of ``F``; an MLP block adds a Gaussian pair integral of the
activation.  Skip connections make ``G`` grow additively, and layer norm in
front of every block keeps each increment of order one.
"""
from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .arch_plan import ArchSpec, EffectiveConstants, ScalingPlan
from .gaussian_oracle import (
    DEFAULT_MOMENT_SAMPLES,
    DEFAULT_ORDER,
    AttnMoments,
    attention_moments,
    gauss_pair_matrix,
    qk_covariance,
)
from .pair_kernel import PairKernel

__all__ = [
    "PairKernel",
    "TraceEntry",
    "KernelTrace",
    "input_kernel",
    "stem_kernel",
    "layer_norm_kernel",
    "mhsa_kernel_step",
    "mlp_kernel_step",
    "head_kernel",
    "propagate_kernels",
]


def input_kernel(inputs: np.ndarray, modality: str) -> PairKernel:
    """Kernel of the raw inputs.

    Vision inputs are real arrays ``(B, T, n_patch)`` and give
    ``(1/n_patch) x1 . x2``; language inputs are integer token ids ``(B, T)``
    and give 1 exactly when the two positions hold the same token.
    """
    x = np.asarray(inputs)
    if x.size == 0:
        raise ValueError("empty input batch")
    if modality == "vision":
        if x.ndim != 3:
            raise ValueError(f"vision inputs must have shape (B, T, n_patch), got {x.shape}")
        B, T, n_patch = x.shape
        flat = x.reshape(B * T, n_patch).astype(float)
        return PairKernel(flat @ flat.T / n_patch, B, T, "G")
    if modality == "language":
        if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
            raise ValueError(f"language inputs must be integer token ids of shape (B, T), got {x.dtype} {x.shape}")
        if np.any(x < 0):
            raise ValueError("token ids must be non-negative")
        B, T = x.shape
        ids = x.reshape(-1)
        return PairKernel((ids[:, None] == ids[None, :]).astype(float), B, T, "G")
    raise ValueError(f"unknown modality {modality!r}")


def stem_kernel(G0: PairKernel, C_emb: float, C_PE: float) -> PairKernel:
    """``C_emb G0 + C_PE delta(t1, t2)``: embedding plus positional embedding."""
    return G0.with_matrix(C_emb * G0.matrix + C_PE * G0.token_delta(), "G")


def ln_scale(G: PairKernel, eps: float) -> np.ndarray:
    """``1 / (sqrt(G_pp + eps) sqrt(G_qq + eps))`` for every pair."""
    d = G.diag + eps
    if np.any(d <= 0):
        raise ValueError("layer norm needs G_pp + eps > 0 on every diagonal entry")
    r = 1.0 / np.sqrt(d)
    return np.outer(r, r)


def layer_norm_kernel(G: PairKernel, eps: float) -> PairKernel:
    """Kernel of the layer-normalized signal: ``G_pq / (sqrt(G_pp+eps) sqrt(G_qq+eps))``."""
    return G.with_matrix(G.matrix * ln_scale(G, eps), "F")


def attention_average(moments: AttnMoments, K: PairKernel) -> np.ndarray:
    """``sum_{t1', t2'} E[Omega_{t1 t1'} Omega_{t2 t2'}] K_{(a;t1')(b;t2')}`` as a ``(P, P)`` matrix."""
    out = np.einsum("atsbuv,asbv->atbu", moments.omega2, K.block4(), optimize=True)
    return out.reshape(K.P, K.P)


def mhsa_kernel_step(
    G: PairKernel, F: PairKernel, C_U: float, C_V: float, moments: AttnMoments | None
) -> PairKernel:
    """Residual MHSA update ``G + C_U C_V sum E[Omega Omega] F``."""
    if moments is None or moments.omega2 is None or moments.omega2_se is None:
        raise ValueError("MHSA step needs attention moments with standard errors")
    if (moments.B, moments.T) != (G.B, G.T):
        raise ValueError("attention moments were computed on a different index set")
    return G.with_matrix(G.matrix + C_U * C_V * attention_average(moments, F), "G")


def mlp_kernel_step(
    G: PairKernel,
    F: PairKernel,
    C_W: float,
    C_X: float,
    activation: str,
    order: int = DEFAULT_ORDER,
) -> PairKernel:
    """Residual MLP update ``G + C_X <sigma sigma>_{C_W F}``."""
    if C_X == 0.0:
        return G.with_matrix(G.matrix, "G")
    ss = gauss_pair_matrix(activation, activation, C_W * F.matrix, order)
    return G.with_matrix(G.matrix + C_X * ss, "G")


def head_kernel(
    F: PairKernel, C: float, modality: str, pooling: str = "none"
) -> tuple[PairKernel, np.ndarray | None]:
    """Output kernel ``C F`` and, with token-mean pooling, its ``B x B`` pooled version.

    ``C`` is ``C_head`` for a vision head and ``C_WE`` for a language head.
    """
    if modality not in ("vision", "language"):
        raise ValueError(f"unknown modality {modality!r}")
    GL = F.with_matrix(C * F.matrix, "G")
    pooled = GL.pooled() if pooling == "token-mean" else None
    return GL, pooled


# ---------------------------------------------------------------------------
# Whole-network trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEntry:
    """One stage of the forward recursion.

    ``moments`` holds the attention statistics an MHSA block used (computed
    from the previous entry's ``F``); ``pooled`` is set on a pooled head.
    """

    label: str
    G: PairKernel
    F: PairKernel | None
    G_se: np.ndarray | None = None
    pooled: np.ndarray | None = None
    pooled_se: np.ndarray | None = None
    moments: AttnMoments | None = field(default=None, repr=False)


@dataclass(frozen=True)
class KernelTrace:
    arch: ArchSpec
    entries: tuple[TraceEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> TraceEntry:
        return self.entries[i]

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def to_csv(self) -> str:
        """One row per (block, pair1, pair2)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "label", "pair1", "pair2", "G", "F", "G_se"])
        for b, e in enumerate(self.entries):
            P = e.G.P
            for p in range(P):
                for q in range(P):
                    F = "" if e.F is None else repr(float(e.F.matrix[p, q]))
                    se = "" if e.G_se is None else repr(float(e.G_se[p, q]))
                    w.writerow([b, e.label, p, q, repr(float(e.G.matrix[p, q])), F, se])
        return buf.getvalue()


def block_label(index: int, kind: str) -> str:
    return f"block{index + 1}:{kind}"


def _masking(kind: str) -> str:
    return "masked" if kind == "mhsa-masked" else "bidirectional"


class PropagationError(FloatingPointError):
    """A recursion step produced an unusable kernel; ``stage`` names where."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@contextmanager
def _labelled(stage: str):
    try:
        yield
    except PropagationError:
        raise
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise PropagationError(stage, str(exc)) from exc


def _require_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("non-finite kernel entries")


def kernel_chain(
    arch: ArchSpec,
    eff: EffectiveConstants,
    G0: PairKernel,
    n_samples: int = DEFAULT_MOMENT_SAMPLES,
    seed: int = 0,
    replicate: int = 0,
    derivatives: bool = False,
    order: int = DEFAULT_ORDER,
) -> list[TraceEntry]:
    """Run the forward recursion once; attention moments use streams keyed by block and replicate."""
    entries = [TraceEntry("input", G0, None)]
    with _labelled("stem"):
        G = stem_kernel(G0, eff.C_emb, eff.C_PE)
        F = layer_norm_kernel(G, arch.eps_ln)
    entries.append(TraceEntry("stem", G, F))
    for i, kind in enumerate(arch.blocks):
        label = block_label(i, kind)
        moments = None
        with _labelled(label):
            if kind == "mlp":
                G = mlp_kernel_step(G, F, eff.C_W, eff.C_X, arch.activation, order)
            else:
                A = qk_covariance(F, eff.C_Q, eff.C_K)
                moments = attention_moments(
                    A, _masking(kind), n_samples, seed, derivatives=derivatives, stream_index=(i, replicate)
                )
                G = mhsa_kernel_step(G, F, eff.C_U, eff.C_V, moments)
            _require_finite(G.matrix)
            F = layer_norm_kernel(G, arch.eps_ln)
        entries.append(TraceEntry(label, G, F, moments=moments))
    with _labelled("head"):
        GL, pooled = head_kernel(F, eff.C_head, arch.modality, arch.pooling)
        _require_finite(GL.matrix)
    entries.append(TraceEntry("head", GL, None, pooled=pooled))
    return entries


def average_entries(runs: list[list[TraceEntry]]) -> tuple[TraceEntry, ...]:
    """Mean over replicate runs with the standard error of that mean."""
    if len(runs) == 1:
        return tuple(runs[0])
    R = len(runs)
    out = []
    for stage in zip(*runs):
        Gs = np.stack([e.G.matrix for e in stage])
        G = stage[0].G.with_matrix(Gs.mean(axis=0))
        se = Gs.std(axis=0, ddof=1) / np.sqrt(R)
        F = None if stage[0].F is None else stage[0].F.with_matrix(np.mean([e.F.matrix for e in stage], axis=0))
        pooled = pooled_se = None
        if stage[0].pooled is not None:
            ps = np.stack([e.pooled for e in stage])
            pooled, pooled_se = ps.mean(axis=0), ps.std(axis=0, ddof=1) / np.sqrt(R)
        out.append(TraceEntry(stage[0].label, G, F, se, pooled, pooled_se, stage[0].moments))
    return tuple(out)


def propagate_kernels(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_samples: int = DEFAULT_MOMENT_SAMPLES,
    seed: int = 0,
    replicates: int = 1,
    order: int = DEFAULT_ORDER,
) -> KernelTrace:
    """Forward kernels from the inputs through stem, every block and the head.

    With ``replicates > 1`` the recursion is repeated with independent
    attention-moment streams and the trace reports their mean together with
    a standard error in ``G_se``.
    """
    if plan.arch.modality != arch.modality:
        raise ValueError("plan was built for a different modality")
    eff = plan.effective()
    G0 = input_kernel(inputs, arch.modality)
    if G0.T != arch.T:
        raise ValueError(f"inputs carry {G0.T} tokens, architecture expects T={arch.T}")
    runs = [kernel_chain(arch, eff, G0, n_samples, seed, r, False, order) for r in range(max(1, replicates))]
    return KernelTrace(arch, average_entries(runs))
