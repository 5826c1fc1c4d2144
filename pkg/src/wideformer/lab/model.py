"""Finite-width Transformers: parameters, forward pass and reverse mode.

Everything runs in float64 numpy.  The backward pass carries a leading
cotangent axis ``K`` so that many output components are differentiated at
once.  Gradients of weight matrices are kept in factored form,
``sum_N outer(left[N], right[N])`` over the (sample, token) axis ``N``,
which makes inner products between gradients (tangent-kernel entries) far
cheaper than materializing them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..activations import ACTIVATIONS
from ..arch_plan import ArchSpec, ScalingPlan
from ..gaussian_oracle import softmax_rows
from ..rng import stream

# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def group_of(name: str, arch: ArchSpec) -> str:
    """Parameter group of a tensor name such as ``"block1.Q"`` or ``"head.w"``."""
    if name == "stem.emb":
        return "Patch" if arch.modality == "vision" else "WordEmb"
    if name == "stem.pos":
        return "PosEmb"
    if name == "head.w":
        return "HeadW"
    if name == "head.b":
        return "HeadB"
    if name == "head.we":
        return "WordEmb"
    if name.startswith("block"):
        return name.split(".", 1)[1]
    raise KeyError(f"unknown parameter {name!r}")


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in canonical order.

    Query, key and value maps are stored as ``(n, n)`` matrices whose rows are
    grouped head by head (rows ``h*C:(h+1)*C`` belong to head ``h``); the
    output map ``U`` is ``(n, n)`` with columns grouped the same way.
    """
    n, M = arch.n, arch.M
    shapes: dict[str, tuple[int, ...]] = {"stem.emb": (n, arch.n_in), "stem.pos": (arch.T, n)}
    for i, kind in enumerate(arch.blocks):
        if kind == "mlp":
            shapes[f"block{i + 1}.W"] = (M * n, n)
            shapes[f"block{i + 1}.X"] = (n, M * n)
        else:
            for g in ("Q", "K", "V", "U"):
                shapes[f"block{i + 1}.{g}"] = (n, n)
    if arch.modality == "vision":
        shapes["head.w"] = (arch.n_out, n)
        shapes["head.b"] = (arch.n_out,)
    elif not arch.weight_tying:
        shapes["head.we"] = (n, arch.n_vocab)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter tensors of one initialization."""

    arch: ArchSpec
    tensors: dict[str, np.ndarray]
    output_rescale: float = 1.0
    dist: str = "normal"
    seed: int = 0

    def __post_init__(self) -> None:
        expected = param_shapes(self.arch)
        if set(expected) != set(self.tensors):
            raise ValueError(f"parameter names {sorted(self.tensors)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {t.shape}")
            t.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def group(self, name: str) -> str:
        return group_of(name, self.arch)

    def head_slices(self, name: str) -> list[np.ndarray]:
        """Per-head views: ``(C, n)`` blocks for Q/K/V, ``(n, C)`` blocks for U."""
        C, H = self.arch.C, self.arch.H
        t = self.tensors[name]
        if name.endswith(".U"):
            return [t[:, h * C:(h + 1) * C] for h in range(H)]
        return [t[h * C:(h + 1) * C] for h in range(H)]

    def updated(self, deltas: dict[str, np.ndarray], scale: float = 1.0, decay: float = 0.0) -> "ModelParams":
        """``theta * (1 - decay) + scale * delta`` for the named tensors."""
        new = {}
        for k, v in self.tensors.items():
            t = v * (1.0 - decay) if decay else v.copy()
            if k in deltas:
                t = t + scale * deltas[k]
            new[k] = t
        return ModelParams(self.arch, new, self.output_rescale, self.dist, self.seed)


def init_model(
    arch: ArchSpec, plan: ScalingPlan, seed: int = 0, dist: str = "normal", replica: int = 0
) -> ModelParams:
    """Draw every tensor i.i.d. mean-zero with its group's variance from ``plan``.

    ``dist='uniform'`` draws from ``[-sqrt(3) sigma, sqrt(3) sigma]``.  Each
    tensor has its own keyed stream, so adding a block never perturbs the
    draws of the others.  ``replica`` indexes independent initializations
    under the same seed.
    """
    if dist not in ("normal", "uniform"):
        raise ValueError(f"dist must be 'normal' or 'uniform', got {dist!r}")
    if plan.arch.modality != arch.modality:
        raise ValueError("plan was built for a different modality")
    tensors = {}
    for idx, (name, shape) in enumerate(param_shapes(arch).items()):
        group = group_of(name, arch)
        if group not in plan.init_var:
            raise ValueError(f"plan has no initialization variance for group {group}")
        sigma = np.sqrt(plan.init_var[group])
        if sigma == 0.0:
            tensors[name] = np.zeros(shape)
            continue
        rng = stream(seed, "init", replica, idx)
        if dist == "normal":
            tensors[name] = sigma * rng.standard_normal(shape)
        else:
            a = np.sqrt(3.0) * sigma
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(arch, tensors, plan.output_rescale, dist, seed)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class LNCache:
    s: np.ndarray  # (B, T, n)
    sigma: np.ndarray  # (B, T, 1)


@dataclass
class MHSACache:
    q: np.ndarray  # (B, H, T, C)
    k: np.ndarray
    v: np.ndarray
    logits: np.ndarray  # (B, H, T, T), already divided by sqrt(C)
    omega: np.ndarray
    o: np.ndarray  # (B, T, n) concatenated head outputs


@dataclass
class MLPCache:
    w: np.ndarray  # (B, T, M n)
    a: np.ndarray


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass.

    ``z[0]`` is the stem output and ``z[l]`` the output of block ``l``;
    ``ln[l]`` normalizes ``z[l]`` (the last one feeds the head).  ``f`` has
    shape ``(B, T, n_out)``; with token-mean pooling ``pooled`` is
    ``(B, n_out)``.
    """

    inputs: np.ndarray
    z: list[np.ndarray] = field(default_factory=list)
    ln: list[LNCache] = field(default_factory=list)
    blocks: list[MHSACache | MLPCache] = field(default_factory=list)
    f: np.ndarray | None = None
    pooled: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.pooled if self.pooled is not None else self.f


def layer_norm(z: np.ndarray, eps: float) -> LNCache:
    mu = z.mean(axis=-1, keepdims=True)
    y = z - mu
    sigma = np.sqrt((y * y).mean(axis=-1, keepdims=True) + eps)
    return LNCache(y / sigma, sigma)


def layer_norm_backward(ds: np.ndarray, cache: LNCache) -> np.ndarray:
    """Exact vector-Jacobian product of layer norm (no affine part)."""
    s, sigma = cache.s, cache.sigma
    dy = (ds - s * (ds * s).mean(axis=-1, keepdims=True)) / sigma
    return dy - dy.mean(axis=-1, keepdims=True)


def _check(x: np.ndarray, label: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {label}")


def _split_heads(x: np.ndarray, H: int) -> np.ndarray:
    B, T, n = x.shape
    return x.reshape(B, T, H, n // H).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """``(..., B, H, T, C) -> (..., B, T, H*C)``."""
    *lead, B, H, T, C = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, B, T, H * C)


def check_inputs(arch: ArchSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs)
    if arch.modality == "vision":
        if x.ndim != 3 or x.shape[1] != arch.T or x.shape[2] != arch.n_in:
            raise ValueError(f"vision inputs must have shape (B, {arch.T}, {arch.n_in}), got {x.shape}")
        return x.astype(float)
    if x.ndim != 2 or x.shape[1] != arch.T or not np.issubdtype(x.dtype, np.integer):
        raise ValueError(f"language inputs must be integer ids of shape (B, {arch.T}), got {x.dtype} {x.shape}")
    if np.any(x < 0) or np.any(x >= arch.n_vocab):
        raise ValueError(f"token ids must lie in [0, {arch.n_vocab})")
    return x


def forward_pass(params: ModelParams, inputs: np.ndarray) -> ForwardTrace:
    arch = params.arch
    x = check_inputs(arch, inputs)
    trace = ForwardTrace(x)
    if arch.modality == "vision":
        z = x @ params["stem.emb"].T + params["stem.pos"][None]
    else:
        z = params["stem.emb"].T[x] + params["stem.pos"][None]
    _check(z, "stem")
    trace.z.append(z)
    sigma_fn = ACTIVATIONS[arch.activation][0]
    H, C = arch.H, arch.C
    for i, kind in enumerate(arch.blocks):
        label = f"block{i + 1}"
        ln = layer_norm(z, arch.eps_ln)
        trace.ln.append(ln)
        s = ln.s
        if kind == "mlp":
            w = s @ params[f"{label}.W"].T
            a = sigma_fn(w)
            r = a @ params[f"{label}.X"].T
            trace.blocks.append(MLPCache(w, a))
        else:
            q = _split_heads(s @ params[f"{label}.Q"].T, H)
            k = _split_heads(s @ params[f"{label}.K"].T, H)
            v = _split_heads(s @ params[f"{label}.V"].T, H)
            logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(C)
            omega = softmax_rows(logits, "masked" if kind == "mhsa-masked" else "bidirectional")
            o = _merge_heads(omega @ v)
            r = o @ params[f"{label}.U"].T
            trace.blocks.append(MHSACache(q, k, v, logits, omega, o))
        z = z + r
        _check(z, f"{label}:{kind}")
        trace.z.append(z)
    ln = layer_norm(z, arch.eps_ln)
    trace.ln.append(ln)
    if arch.modality == "vision":
        f = ln.s @ params["head.w"].T + params["head.b"]
    else:
        we = params["stem.emb"] if arch.weight_tying else params["head.we"]
        f = params.output_rescale * (ln.s @ we)
    _check(f, "head")
    trace.f = f
    if arch.pooling == "token-mean":
        trace.pooled = f.mean(axis=1)
    return trace


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    """Gradient term ``sum_N outer(left[k, N], right[k, N])``.

    Either side may lack the leading ``K`` axis when it does not depend on
    the cotangent (it is then shared by all ``k``).
    """

    left: np.ndarray
    right: np.ndarray

    def _with_k(self, x: np.ndarray, K: int) -> np.ndarray:
        return x if x.ndim == 3 else np.broadcast_to(x, (K, *x.shape))

    def full(self, K: int) -> np.ndarray:
        return np.einsum("kna,knb->kab", self._with_k(self.left, K), self._with_k(self.right, K), optimize=True)


def _side_gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[k, n, l, m] = a[k, n] . b[l, m]`` with K-free sides broadcast."""
    if a.ndim == 2 and b.ndim == 2:
        return (a @ b.T)[None, :, None, :]
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    Ka, N, d = a.shape
    Kb, Mm, _ = b.shape
    return (a.reshape(Ka * N, d) @ b.reshape(Kb * Mm, d).T).reshape(Ka, N, Kb, Mm)


def factor_inner(x: Factor, y: Factor) -> np.ndarray:
    """``(K, K)`` matrix of Frobenius inner products between two factored gradients."""
    ll = _side_gram(x.left, y.left)
    rr = _side_gram(x.right, y.right)
    return np.einsum("knlm,knlm->kl", *np.broadcast_arrays(ll, rr), optimize=True)


@dataclass
class Gradients:
    """Per-tensor gradients of ``K`` scalar functions (one per cotangent)."""

    arch: ArchSpec
    K: int
    dense: dict[str, np.ndarray] = field(default_factory=dict)
    factors: dict[str, list[Factor]] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(dict.fromkeys([*self.factors, *self.dense]))

    def full(self, name: str) -> np.ndarray:
        """Materialized gradient of shape ``(K, *param_shape)``."""
        out = self.dense.get(name)
        for fct in self.factors.get(name, []):
            part = fct.full(self.K)
            out = part if out is None else out + part
        if out is None:
            raise KeyError(name)
        return out

    def all_full(self) -> dict[str, np.ndarray]:
        return {name: self.full(name) for name in self.names()}

    def gram(self, name: str) -> np.ndarray:
        """``(K, K)`` Gram matrix of one tensor's gradients."""
        out = np.zeros((self.K, self.K))
        if name in self.dense:
            g = self.dense[name].reshape(self.K, -1)
            out += g @ g.T
        terms = self.factors.get(name, [])
        for a in terms:
            for b in terms:
                out += factor_inner(a, b)
        return out

    def group_grams(self) -> dict[str, np.ndarray]:
        """Gram matrices summed over the tensors of each parameter group."""
        out: dict[str, np.ndarray] = {}
        for name in self.names():
            g = group_of(name, self.arch)
            out[g] = out.get(g, 0.0) + self.gram(name)
        return out

    def _add_factor(self, name: str, left: np.ndarray, right: np.ndarray) -> None:
        self.factors.setdefault(name, []).append(Factor(left, right))


def backward(params: ModelParams, trace: ForwardTrace, cotangent: np.ndarray) -> Gradients:
    """Vector-Jacobian products for a stack of cotangents on the output.

    ``cotangent`` has shape ``(K, *trace.output.shape)``; the result holds the
    ``K`` gradients of ``sum(cotangent[k] * output)`` for every tensor.
    """
    arch = params.arch
    cot = np.asarray(cotangent, dtype=float)
    out_shape = trace.output.shape
    if cot.shape[1:] != out_shape:
        raise ValueError(f"cotangent must have shape (K, {out_shape}), got {cot.shape}")
    K = cot.shape[0]
    B, T = trace.z[0].shape[:2]
    N = B * T
    grads = Gradients(arch, K)
    if trace.pooled is not None:
        df = np.broadcast_to(cot[:, :, None, :] / T, (K, B, T, cot.shape[-1]))
    else:
        df = cot
    ln = trace.ln[-1]
    s_flat = ln.s.reshape(N, -1)
    df_flat = df.reshape(K, N, -1)
    if arch.modality == "vision":
        grads._add_factor("head.w", df_flat, s_flat)
        grads.dense["head.b"] = df_flat.sum(axis=1)
        ds = df @ params["head.w"]
    else:
        name = "stem.emb" if arch.weight_tying else "head.we"
        r = params.output_rescale
        grads._add_factor(name, s_flat, r * df_flat)
        ds = r * (df @ params[name].T)
    dz = layer_norm_backward(ds, ln)
    _check(dz, "head backward")
    sigma_d = ACTIVATIONS[arch.activation][1]
    C = arch.C
    for i in reversed(range(arch.depth)):
        kind = arch.blocks[i]
        label = f"block{i + 1}"
        ln = trace.ln[i]
        s_flat = ln.s.reshape(N, -1)
        cache = trace.blocks[i]
        dr = dz
        dr_flat = dr.reshape(K, N, -1)
        if kind == "mlp":
            grads._add_factor(f"{label}.X", dr_flat, cache.a.reshape(N, -1))
            da = dr @ params[f"{label}.X"]
            dw = da * sigma_d(cache.w)
            grads._add_factor(f"{label}.W", dw.reshape(K, N, -1), s_flat)
            ds = dw @ params[f"{label}.W"]
        else:
            grads._add_factor(f"{label}.U", dr_flat, cache.o.reshape(N, -1))
            do = _split_heads_k(dr @ params[f"{label}.U"], arch.H)  # (K, B, H, T, C)
            omega = cache.omega
            d_omega = do @ np.swapaxes(cache.v, -1, -2)
            dv = np.swapaxes(omega, -1, -2) @ do
            dlog = omega * (d_omega - (d_omega * omega).sum(axis=-1, keepdims=True))
            dq = dlog @ cache.k / np.sqrt(C)
            dk = np.swapaxes(dlog, -1, -2) @ cache.q / np.sqrt(C)
            ds = 0.0
            for g, d in (("Q", dq), ("K", dk), ("V", dv)):
                d_cat = _merge_heads(d)
                grads._add_factor(f"{label}.{g}", d_cat.reshape(K, N, -1), s_flat)
                ds = ds + d_cat @ params[f"{label}.{g}"]
        dz = dz + layer_norm_backward(ds, ln)
        _check(dz, f"{label}:{kind} backward")
    dz_flat = dz.reshape(K, N, -1)
    if arch.modality == "vision":
        grads._add_factor("stem.emb", dz_flat, trace.inputs.reshape(N, -1))
    else:
        onehot = np.zeros((N, arch.n_vocab))
        onehot[np.arange(N), trace.inputs.reshape(-1)] = 1.0
        grads._add_factor("stem.emb", dz_flat, onehot)
    grads.dense["stem.pos"] = dz.sum(axis=1)
    return grads


def _split_heads_k(x: np.ndarray, H: int) -> np.ndarray:
    K, B, T, n = x.shape
    return x.reshape(K, B, T, H, n // H).transpose(0, 1, 3, 2, 4)


def output_jacobian(
    params: ModelParams, inputs: np.ndarray, selector: list[tuple[int, ...]] | None = None
) -> tuple[ForwardTrace, Gradients]:
    """Gradients of selected output components with respect to every tensor.

    ``selector`` lists output indices, ``(alpha, t, i)`` for token outputs or
    ``(alpha, i)`` for pooled outputs; by default every component is selected.
    """
    trace = forward_pass(params, inputs)
    shape = trace.output.shape
    if selector is None:
        selector = [tuple(int(v) for v in idx) for idx in np.ndindex(*shape)]
    cot = np.zeros((len(selector), *shape))
    for k, idx in enumerate(selector):
        cot[(k, *idx)] = 1.0
    return trace, backward(params, trace, cot)
