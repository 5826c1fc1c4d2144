"""Infinite-width neural tangent kernel, block by block.

Every block changes the tangent kernel in two ways.  Its own parameters add
a fresh, non-negative contribution (the *additive* term).  Contributions from
earlier parameters flow through the skip connection unchanged and through the
residual branch after being divided by the layer-norm scale (the
*cumulative* term).  Terms that mix the skip and residual paths vanish in
expectation, because every residual branch ends in a mean-zero weight matrix.

The kernel is tracked separately for every parameter group.  The cumulative
maps are linear, so the per-group pieces add up to the total, and each piece
can be compared directly with a simulated sum over that group's parameters.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .arch_plan import ArchSpec, EffectiveConstants, ScalingPlan
from .gaussian_oracle import DEFAULT_MOMENT_SAMPLES, DEFAULT_ORDER, AttnMoments, gauss_pair_matrix
from .kernel_engine import (
    KernelTrace,
    TraceEntry,
    attention_average,
    average_entries,
    input_kernel,
    kernel_chain,
    ln_scale,
)
from .pair_kernel import PairKernel

__all__ = [
    "NtkEntry",
    "NtkTrace",
    "stem_ntk",
    "ln_backward_factor",
    "mhsa_ntk_step",
    "mlp_ntk_step",
    "head_ntk",
    "propagate_ntk",
    "propagate",
]

Groups = dict[str, np.ndarray]


def ln_backward_factor(G: PairKernel, eps: float) -> np.ndarray:
    """Entrywise factor by which layer norm shrinks an incoming tangent kernel."""
    return ln_scale(G, eps)


def stem_ntk(G0: PairKernel, eff: EffectiveConstants, modality: str) -> Groups:
    """First-block tangent kernel, split into the embedding and positional groups.

    The per-parameter learning-rate factors cancel the fan-in of the
    embedding by construction, so only the order-one ``Lam`` remain.
    """
    delta = G0.token_delta()
    if modality == "vision":
        return {"Patch": eff.Lam["Patch"] * G0.matrix, "PosEmb": eff.Lam["PosEmb"] * delta}
    if modality == "language":
        return {"WordEmb": eff.Lam["WordEmb"] * G0.matrix, "PosEmb": eff.Lam["PosEmb"] * delta}
    raise ValueError(f"unknown modality {modality!r}")


def _derivative_contraction(moments: AttnMoments, F4: np.ndarray, X4: np.ndarray) -> np.ndarray:
    """``sum E[J_{t1 s1 r1} J_{t2 s2 r2}] F_{s1 s2} X_{r1 r2}`` over the primed token indices."""
    return np.einsum("atsrbuvw,asbv,arbw->atbu", moments.domega2, F4, X4, optimize=True)


def mhsa_ntk_step(
    theta: Groups,
    G: PairKernel,
    F: PairKernel,
    moments: AttnMoments,
    eff: EffectiveConstants,
    eps: float,
) -> tuple[Groups, Groups]:
    """Tangent kernel after a residual MHSA block.

    Returns ``(new per-group kernels, this block's additive terms)``.
    ``G`` and ``F`` belong to the block input; ``moments`` must include the
    softmax-Jacobian moments.
    """
    if moments is None or moments.domega2 is None:
        raise ValueError("MHSA tangent-kernel step needs softmax-Jacobian moments")
    P = F.P
    F4 = F.block4()
    cuv = eff.C_U * eff.C_V
    avg_F = attention_average(moments, F)
    S1 = _derivative_contraction(moments, F4, F4).reshape(P, P)
    qk_core = cuv * F.matrix * S1
    additive = {
        "Q": eff.Lam["Q"] * eff.C_K * qk_core,
        "K": eff.Lam["K"] * eff.C_Q * qk_core,
        "V": eff.Lam["V"] * eff.C_U * avg_F,
        "U": eff.Lam["U"] * eff.C_V * avg_F,
    }
    scale = ln_backward_factor(G, eps)
    qk = eff.C_Q * eff.C_K
    out: Groups = {}
    for g, th in theta.items():
        X = scale * th
        Xk = F.with_matrix(X, "Theta")
        value_path = attention_average(moments, Xk)
        logit_path = S1 * X + F.matrix * _derivative_contraction(moments, F4, Xk.block4()).reshape(P, P)
        out[g] = th + cuv * value_path + cuv * qk * logit_path
    for g, a in additive.items():
        out[g] = out.get(g, 0.0) + a
    return out, additive


def mlp_ntk_step(
    theta: Groups,
    G: PairKernel,
    F: PairKernel,
    activation: str,
    eff: EffectiveConstants,
    eps: float,
    order: int = DEFAULT_ORDER,
) -> tuple[Groups, Groups]:
    """Tangent kernel after a residual MLP block; returns ``(new kernels, additive terms)``."""
    K = eff.C_W * F.matrix
    ss = gauss_pair_matrix(activation, activation, K, order)
    act_d = activation + "'"
    dd = gauss_pair_matrix(act_d, act_d, K, order)
    additive = {
        "X": eff.Lam["X"] * ss,
        "W": eff.Lam["W"] * eff.C_X * dd * F.matrix,
    }
    mult = eff.C_X * eff.C_W * dd * ln_backward_factor(G, eps)
    out = {g: th + mult * th for g, th in theta.items()}
    for g, a in additive.items():
        out[g] = out.get(g, 0.0) + a
    return out, additive


def head_ntk(
    theta: Groups,
    G: PairKernel,
    F: PairKernel,
    eff: EffectiveConstants,
    modality: str,
    eps: float,
) -> tuple[Groups, Groups]:
    """Output tangent kernel.  There is no skip path past the head."""
    scale = eff.C_head * ln_backward_factor(G, eps)
    out = {g: scale * th for g, th in theta.items()}
    if modality == "vision":
        additive = {
            "HeadW": eff.Lam["HeadW"] * F.matrix,
            "HeadB": eff.Lam["HeadB"] * np.ones_like(F.matrix),
        }
    elif modality == "language":
        additive = {"WordEmb": eff.Lam["WordEmbHead"] * F.matrix}
    else:
        raise ValueError(f"unknown modality {modality!r}")
    for g, a in additive.items():
        out[g] = out.get(g, 0.0) + a
    return out, additive


# ---------------------------------------------------------------------------
# Whole-network trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NtkEntry:
    """Tangent kernel after one stage, with its per-group split.

    ``groups`` is the full per-group decomposition of ``theta``; ``additive``
    lists only what this stage's own parameters contributed.  ``*_se`` are
    replicate standard errors when several replicates were run.
    """

    label: str
    theta: PairKernel
    groups: dict[str, np.ndarray]
    additive: dict[str, np.ndarray]
    theta_se: np.ndarray | None = None
    groups_se: dict[str, np.ndarray] | None = None
    pooled: np.ndarray | None = None
    pooled_groups: dict[str, np.ndarray] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class NtkTrace:
    arch: ArchSpec
    entries: tuple[NtkEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> NtkEntry:
        return self.entries[i]

    @property
    def output(self) -> NtkEntry:
        return self.entries[-1]

    def to_csv(self) -> str:
        """Rows ``(block, label, pair1, pair2, theta, group, group_total, group_additive)``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "label", "pair1", "pair2", "theta", "group", "group_total", "group_additive"])
        for b, e in enumerate(self.entries):
            P = e.theta.P
            for p in range(P):
                for q in range(P):
                    t = repr(float(e.theta.matrix[p, q]))
                    for g, m in e.groups.items():
                        add = e.additive.get(g)
                        w.writerow([b, e.label, p, q, t, g, repr(float(m[p, q])),
                                    "" if add is None else repr(float(add[p, q]))])
        return buf.getvalue()


def ntk_chain(arch: ArchSpec, eff: EffectiveConstants, kentries: list[TraceEntry], order: int) -> list[NtkEntry]:
    G0 = kentries[0].G
    theta = stem_ntk(G0, eff, arch.modality)
    out = [_entry("stem", G0, theta, dict(theta))]
    for i, kind in enumerate(arch.blocks):
        prev = kentries[i + 1]  # stem is entry 1, block i consumes entry i + 1
        if kind == "mlp":
            theta, add = mlp_ntk_step(theta, prev.G, prev.F, arch.activation, eff, arch.eps_ln, order)
        else:
            theta, add = mhsa_ntk_step(theta, prev.G, prev.F, kentries[i + 2].moments, eff, arch.eps_ln)
        out.append(_entry(kentries[i + 2].label, G0, theta, add))
    last = kentries[-2]
    theta, add = head_ntk(theta, last.G, last.F, eff, arch.modality, arch.eps_ln)
    head = _entry("head", G0, theta, add)
    if arch.pooling == "token-mean":
        pooled_groups = {g: _pool(m, G0) for g, m in theta.items()}
        head = NtkEntry(head.label, head.theta, head.groups, head.additive,
                        pooled=_pool(head.theta.matrix, G0), pooled_groups=pooled_groups)
    out.append(head)
    return out


def _pool(m: np.ndarray, like: PairKernel) -> np.ndarray:
    return m.reshape(like.B, like.T, like.B, like.T).mean(axis=(1, 3))


def _entry(label: str, like: PairKernel, groups: Groups, additive: Groups) -> NtkEntry:
    total = sum(groups.values())
    return NtkEntry(label, like.with_matrix(total, "Theta"), dict(groups), dict(additive))


def _average_ntk(runs: list[list[NtkEntry]]) -> tuple[NtkEntry, ...]:
    if len(runs) == 1:
        return tuple(runs[0])
    R = len(runs)
    out = []
    for stage in zip(*runs):
        first = stage[0]
        thetas = np.stack([e.theta.matrix for e in stage])
        groups, groups_se = {}, {}
        for g in first.groups:
            ms = np.stack([e.groups[g] for e in stage])
            groups[g], groups_se[g] = ms.mean(axis=0), ms.std(axis=0, ddof=1) / np.sqrt(R)
        additive = {g: np.mean([e.additive[g] for e in stage], axis=0) for g in first.additive}
        pooled = pooled_groups = None
        if first.pooled is not None:
            pooled = np.mean([e.pooled for e in stage], axis=0)
            pooled_groups = {g: np.mean([e.pooled_groups[g] for e in stage], axis=0) for g in first.pooled_groups}
        out.append(NtkEntry(first.label, first.theta.with_matrix(thetas.mean(axis=0)), groups, additive,
                            thetas.std(axis=0, ddof=1) / np.sqrt(R), groups_se, pooled, pooled_groups))
    return tuple(out)


def propagate(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_samples: int = DEFAULT_MOMENT_SAMPLES,
    seed: int = 0,
    replicates: int = 1,
    order: int = DEFAULT_ORDER,
) -> tuple[KernelTrace, NtkTrace]:
    """Forward kernels and tangent kernels from one shared set of attention moments."""
    if plan.arch.modality != arch.modality:
        raise ValueError("plan was built for a different modality")
    eff = plan.effective()
    G0 = input_kernel(inputs, arch.modality)
    if G0.T != arch.T:
        raise ValueError(f"inputs carry {G0.T} tokens, architecture expects T={arch.T}")
    kruns, nruns = [], []
    for r in range(max(1, replicates)):
        kentries = kernel_chain(arch, eff, G0, n_samples, seed, r, True, order)
        kruns.append(kentries)
        nruns.append(ntk_chain(arch, eff, kentries, order))
    return KernelTrace(arch, average_entries(kruns)), NtkTrace(arch, _average_ntk(nruns))


def propagate_ntk(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_samples: int = DEFAULT_MOMENT_SAMPLES,
    seed: int = 0,
    replicates: int = 1,
    order: int = DEFAULT_ORDER,
) -> NtkTrace:
    """Tangent kernel from the stem through every block to the head, with per-group breakdown."""
    return propagate(arch, plan, inputs, n_samples, seed, replicates, order)[1]
