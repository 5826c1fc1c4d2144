"""Monte-Carlo estimators over independent initializations.

Each estimator loops over ``n_inits`` initializations (replica ``j`` of
``seed``), reduces every one to a small array, and reports the mean with its
standard error.  Reductions happen in replica order, so results are
bit-reproducible for a given seed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..arch_plan import ArchSpec, ScalingPlan
from .model import (
    ForwardTrace,
    ModelParams,
    backward,
    forward_pass,
    group_of,
    init_model,
    layer_norm_backward,
)

MIN_INITS = 16


@dataclass(frozen=True)
class McSummary:
    """Mean and standard error of a Monte-Carlo estimate."""

    label: str
    estimate: np.ndarray
    stderr: np.ndarray
    n_inits: int
    groups: dict[str, np.ndarray] | None = None
    groups_se: dict[str, np.ndarray] | None = None

    def to_csv_rows(self, block: int | str) -> list[list]:
        rows = []
        est = np.atleast_2d(self.estimate)
        se = np.atleast_2d(self.stderr)
        for p, q in np.ndindex(*est.shape):
            rows.append([block, self.label, p, q, repr(float(est[p, q])), repr(float(se[p, q])), self.n_inits])
        return rows


def summaries_to_csv(summaries: Iterable[McSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "label", "pair1", "pair2", "estimate", "stderr", "n_inits"])
    for b, s in enumerate(summaries):
        w.writerows(s.to_csv_rows(b))
    return buf.getvalue()


class _Accumulator:
    """Running sums of named arrays for means and standard errors."""

    def __init__(self) -> None:
        self.s1: dict[str, np.ndarray] = {}
        self.s2: dict[str, np.ndarray] = {}
        self.count = 0

    def add(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            v = np.asarray(v, dtype=float)
            if k in self.s1:
                self.s1[k] = self.s1[k] + v
                self.s2[k] = self.s2[k] + v * v
            else:
                self.s1[k] = v.copy()
                self.s2[k] = v * v
        self.count += 1

    def mean(self, k: str) -> np.ndarray:
        return self.s1[k] / self.count

    def stderr(self, k: str) -> np.ndarray:
        n = self.count
        if n < 2:
            return np.full_like(self.s1[k], np.inf)
        m = self.s1[k] / n
        var = np.clip(self.s2[k] / n - m * m, 0.0, None) * n / (n - 1)
        return np.sqrt(var / n)

    def summary(self, k: str, label: str | None = None) -> McSummary:
        return McSummary(label or k, self.mean(k), self.stderr(k), self.count)


def _run(
    arch: ArchSpec,
    plan: ScalingPlan,
    n_inits: int,
    seed: int,
    body: Callable[[ModelParams], dict[str, np.ndarray]],
    dist: str = "normal",
    min_inits: int = 1,
) -> _Accumulator:
    if n_inits < min_inits:
        raise ValueError(f"need at least {min_inits} initializations, got {n_inits}")
    acc = _Accumulator()
    for j in range(n_inits):
        acc.add(body(init_model(arch, plan, seed, dist, replica=j)))
    return acc


def head_channels(arch: ArchSpec, inputs: np.ndarray, limit: int | None = None) -> np.ndarray:
    """Output channels used for channel averages.

    For language models only vocabulary entries absent from the batch are
    used: with a tied readout, the channel of a token that appears in the
    input shares its embedding column with the stem, and that correlation is
    left out of the infinite-width theory.
    """
    if arch.modality == "vision":
        ch = np.arange(arch.n_out)
    else:
        present = set(np.asarray(inputs).reshape(-1).tolist())
        ch = np.array([v for v in range(arch.n_vocab) if v not in present], dtype=int)
        if ch.size == 0:
            raise ValueError("every vocabulary entry appears in the batch; no clean output channel left")
    return ch if limit is None else ch[:limit]


def stage_labels(arch: ArchSpec) -> list[str]:
    return ["stem", *[f"block{i + 1}:{k}" for i, k in enumerate(arch.blocks)], "head"]


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelEstimate:
    """Per-stage kernel estimates (``stem``, blocks, ``head``) and cross-channel covariances."""

    stages: list[McSummary]
    off_channel: list[McSummary]
    pooled: McSummary | None = None
    abs_dev: list[McSummary] | None = None


def _channel_kernels(trace: ForwardTrace, channels: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    same, cross = [], []
    for z in trace.z:
        B, T, n = z.shape
        flat = z.reshape(B * T, n)
        same.append(flat @ flat.T / n)
        cross.append(flat @ np.roll(flat, -1, axis=1).T / n)
    f = trace.f[..., channels]
    B, T, c = f.shape
    flat = f.reshape(B * T, c)
    same.append(flat @ flat.T / c)
    cross.append(flat @ np.roll(flat, -1, axis=1).T / c if c > 1 else np.zeros((B * T, B * T)))
    return same, cross


def empirical_kernel(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    seed: int = 0,
    dist: str = "normal",
    reference: Sequence[np.ndarray] | None = None,
) -> KernelEstimate:
    """Channel-averaged ``(1/n) sum_i z_{p,i} z_{q,i}`` for every stage.

    ``off_channel`` reports ``(1/n) sum_i z_{p,i} z_{q,i+1}``, a covariance
    between distinct channels that vanishes in expectation.  With
    ``reference`` kernels (one per stage) the per-instantiation distance
    ``|G_hat - reference|`` is averaged as well, in ``abs_dev``.
    """
    channels = head_channels(arch, inputs)
    labels = stage_labels(arch)
    if reference is not None and len(reference) != len(labels):
        raise ValueError(f"need one reference kernel per stage ({len(labels)}), got {len(reference)}")

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        trace = forward_pass(params, inputs)
        same, cross = _channel_kernels(trace, channels)
        out = {f"G{i}": g for i, g in enumerate(same)}
        out.update({f"X{i}": g for i, g in enumerate(cross)})
        if reference is not None:
            out.update({f"D{i}": np.abs(g - r) for i, (g, r) in enumerate(zip(same, reference))})
        if trace.pooled is not None:
            pf = trace.pooled[:, channels]
            out["pooled"] = pf @ pf.T / len(channels)
        return out

    acc = _run(arch, plan, n_inits, seed, body, dist, MIN_INITS)
    stages = [acc.summary(f"G{i}", lab) for i, lab in enumerate(labels)]
    off = [acc.summary(f"X{i}", lab) for i, lab in enumerate(labels)]
    pooled = acc.summary("pooled", "head:pooled") if "pooled" in acc.s1 else None
    dev = [acc.summary(f"D{i}", lab) for i, lab in enumerate(labels)] if reference is not None else None
    return KernelEstimate(stages, off, pooled, dev)


# ---------------------------------------------------------------------------
# Tangent kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NtkEstimate:
    """Channel-diagonal tangent kernel (total and per group) and its cross-channel counterpart."""

    total: McSummary
    cross_channel: McSummary
    channels: np.ndarray = field(repr=False)


def _ntk_cotangents(output_shape: tuple[int, ...], channels: np.ndarray) -> np.ndarray:
    """One-hot cotangents ordered (channel, position)."""
    positions = list(np.ndindex(*output_shape[:-1]))
    cot = np.zeros((len(channels) * len(positions), *output_shape))
    k = 0
    for c in channels:
        for pos in positions:
            cot[(k, *pos, c)] = 1.0
            k += 1
    return cot


def empirical_ntk(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    seed: int = 0,
    max_channels: int | None = 4,
    dist: str = "normal",
) -> NtkEstimate:
    """``sum_mu lambda_G(mu) df_{p,i}/dtheta_mu df_{q,i}/dtheta_mu`` averaged over channels ``i``.

    Learning-rate factors are the plan's SGD factors.  The per-group partial
    sums are kept.  The cross-channel statistic averages the same sum with
    ``i != j`` over channel pairs.
    """
    channels = head_channels(arch, inputs, max_channels)
    lam = plan.sgd_factor

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        trace = forward_pass(params, inputs)
        shape = trace.output.shape
        P = int(np.prod(shape[:-1]))
        I = len(channels)
        grads = backward(params, trace, _ntk_cotangents(shape, channels))
        out: dict[str, np.ndarray] = {}
        total = np.zeros((I * P, I * P))
        for g, gram in grads.group_grams().items():
            weighted = lam[g] * gram
            total += weighted
            out[f"g:{g}"] = _channel_diag(weighted, I, P)
        out["total"] = _channel_diag(total, I, P)
        out["cross"] = _channel_cross(total, I, P)
        return out

    acc = _run(arch, plan, n_inits, seed, body, dist, MIN_INITS)
    groups = {k[2:]: acc.mean(k) for k in acc.s1 if k.startswith("g:")}
    groups_se = {k[2:]: acc.stderr(k) for k in acc.s1 if k.startswith("g:")}
    total = McSummary("ntk", acc.mean("total"), acc.stderr("total"), acc.count, groups, groups_se)
    return NtkEstimate(total, acc.summary("cross", "ntk:cross-channel"), channels)


def _channel_diag(m: np.ndarray, I: int, P: int) -> np.ndarray:
    blocks = m.reshape(I, P, I, P)
    return np.mean([blocks[i, :, i, :] for i in range(I)], axis=0)


def _channel_cross(m: np.ndarray, I: int, P: int) -> np.ndarray:
    if I < 2:
        return np.zeros((P, P))
    blocks = m.reshape(I, P, I, P)
    return np.mean([blocks[i, :, j, :] for i in range(I) for j in range(I) if i != j], axis=0)


def stem_only_ntk(params: ModelParams, inputs: np.ndarray, plan: ScalingPlan) -> np.ndarray:
    """Per-init tangent kernel of the stem output ``z[0]`` in channel 0 (checks determinism)."""
    arch = params.arch
    trace = forward_pass(params, inputs)
    x = trace.inputs
    B, T = trace.z[0].shape[:2]
    lam = plan.sgd_factor
    if arch.modality == "vision":
        flat = x.reshape(B * T, -1)
        emb = lam["Patch"] * flat @ flat.T
    else:
        ids = x.reshape(-1)
        emb = lam["WordEmb"] * (ids[:, None] == ids[None, :]).astype(float)
    t = np.tile(np.arange(T), B)
    return emb + lam["PosEmb"] * (t[:, None] == t[None, :])


# ---------------------------------------------------------------------------
# Gradient magnitudes and one-step probes
# ---------------------------------------------------------------------------


def surrogate_cotangent(output_shape: tuple[int, ...]) -> np.ndarray:
    """``dL/df`` for ``L = sum(f) / (number of output entries)``, with a leading K=1 axis."""
    return np.full((1, *output_shape), 1.0 / np.prod(output_shape))


def _surrogate_grads(params: ModelParams, inputs: np.ndarray) -> tuple[ForwardTrace, dict[str, np.ndarray]]:
    trace = forward_pass(params, inputs)
    grads = backward(params, trace, surrogate_cotangent(trace.output.shape))
    return trace, {k: v[0] for k, v in grads.all_full().items()}


def grad_magnitude_stats(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    seed: int = 0,
    dist: str = "normal",
) -> dict[str, McSummary]:
    """Mean ``|dL/dtheta|`` over the entries of each group, averaged over initializations."""

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        _, grads = _surrogate_grads(params, inputs)
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for name, g in grads.items():
            grp = group_of(name, arch)
            sums[grp] = sums.get(grp, 0.0) + float(np.abs(g).sum())
            counts[grp] = counts.get(grp, 0) + g.size
        return {grp: np.array(sums[grp] / counts[grp]) for grp in sums}

    acc = _run(arch, plan, n_inits, seed, body, dist)
    return {g: acc.summary(g) for g in acc.s1}


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def one_step_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    plan: ScalingPlan,
    optimizer: str,
    lr: float,
    adamw: AdamWConfig = AdamWConfig(),
) -> ModelParams:
    """Apply one SGD or AdamW step with the plan's per-group factors.

    AdamW is taken at its first step: with zero-initialized moments and bias
    correction the update direction is ``g / (|g| + eps)``.  Weight decay is
    decoupled and not multiplied by the group factor.
    """
    opt = optimizer.lower()
    factors = plan.lr_factor(opt)
    deltas = {}
    for name, g in grads.items():
        lam = factors[group_of(name, params.arch)]
        if opt == "sgd":
            deltas[name] = -lam * g
        else:
            m = (1.0 - adamw.beta1) * g
            v = (1.0 - adamw.beta2) * g * g
            m_hat = m / (1.0 - adamw.beta1)
            v_hat = v / (1.0 - adamw.beta2)
            deltas[name] = -lam * m_hat / (np.sqrt(v_hat) + adamw.eps)
    decay = lr * adamw.weight_decay if opt == "adamw" else 0.0
    new = params.updated(deltas, scale=lr, decay=decay)
    for name, t in new.tensors.items():
        if not np.all(np.isfinite(t)):
            raise FloatingPointError(f"non-finite parameters in {name} after the update")
    return new


def one_step_probe(
    arch: ArchSpec,
    plan: ScalingPlan,
    optimizer: str,
    lr: float,
    inputs: np.ndarray,
    n_inits: int,
    seed: int = 0,
    adamw: AdamWConfig = AdamWConfig(),
    dist: str = "normal",
) -> McSummary:
    """Mean ``|f(after one step) - f(before)| / lr`` on the batch, over initializations."""
    if lr <= 0:
        raise ValueError("lr must be positive")

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        trace, grads = _surrogate_grads(params, inputs)
        new = one_step_update(params, grads, plan, optimizer, lr, adamw)
        after = forward_pass(new, inputs).output
        return {"df": np.array(np.abs(after - trace.output).mean() / lr)}

    acc = _run(arch, plan, n_inits, seed, body, dist)
    return acc.summary("df", f"{optimizer}:|df|/lr")


# ---------------------------------------------------------------------------
# Layer-norm and attention statistics
# ---------------------------------------------------------------------------


def ln_backward_stats(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    stage: int = 0,
    seed: int = 0,
) -> McSummary:
    """Empirical layer-norm backward factor ``(1/n) sum_{j,k} ds_j(p)/dz_k(p) ds_j(q)/dz_k(q)``.

    The Jacobians come from the same vector-Jacobian routine the backward
    pass uses, applied to identity cotangents.
    """

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        trace = forward_pass(params, inputs)
        cache = trace.ln[stage]
        B, T, n = cache.s.shape
        eye = np.broadcast_to(np.eye(n)[:, None, None, :], (n, B, T, n))
        jac = layer_norm_backward(eye, cache).reshape(n, B * T, n)  # jac[j, p, k] = ds_j(p)/dz_k(p)
        return {"ln": np.einsum("jpk,jqk->pq", jac, jac) / n}

    acc = _run(arch, plan, n_inits, seed, body)
    return acc.summary("ln", f"ln-backward:{stage}")


def ln_moment_stats(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    G_diag: Mapping[int, np.ndarray],
    seed: int = 0,
) -> dict[int, dict[str, McSummary]]:
    """Finite-width layer-norm corrections at the stages keyed in ``G_diag``.

    Per position ``p`` of stage ``z[k]``: ``dG = (1/n) sum z^2 - G_pp`` and
    ``nG = ((1/n) sum z)^2``.  Returns, per stage, the means of ``dG``,
    ``nG``, ``dG^2`` and ``dG nG``, plus ``2 G^2 / n``, the Gaussian part of
    ``dG^2``.  One forward pass per initialization serves every stage.
    """
    stages = sorted(G_diag)

    def body(params: ModelParams) -> dict[str, np.ndarray]:
        zs = forward_pass(params, inputs).z
        out = {}
        for k in stages:
            z = zs[k]
            B, T, n = z.shape
            flat = z.reshape(B * T, n)
            dG = (flat * flat).mean(axis=1) - G_diag[k]
            nG = flat.mean(axis=1) ** 2
            out.update({f"{k}:dG": dG, f"{k}:nG": nG, f"{k}:dG2": dG * dG, f"{k}:dGnG": dG * nG})
        return out

    acc = _run(arch, plan, n_inits, seed, body)
    result = {}
    for k in stages:
        out = {m: acc.summary(f"{k}:{m}", m) for m in ("dG", "nG", "dG2", "dGnG")}
        g = np.asarray(G_diag[k], dtype=float)
        out["gauss_dG2"] = McSummary("gauss_dG2", 2.0 * g ** 2 / arch.n, np.zeros_like(g), acc.count)
        result[k] = out
    return result


def logit_samples(
    arch: ArchSpec,
    plan: ScalingPlan,
    inputs: np.ndarray,
    n_inits: int,
    block: int,
    seed: int = 0,
) -> np.ndarray:
    """Query-key logits of MHSA block ``block`` (1-based), shape ``(n_inits, H, B*T*T)``."""
    kind = arch.blocks[block - 1]
    if not kind.startswith("mhsa"):
        raise ValueError(f"block {block} is {kind}, not an attention block")
    out = []
    for j in range(n_inits):
        params = init_model(arch, plan, seed, replica=j)
        cache = forward_pass(params, inputs).blocks[block - 1]
        lg = cache.logits  # (B, H, T, T)
        out.append(lg.transpose(1, 0, 2, 3).reshape(arch.H, -1))
    return np.stack(out)
