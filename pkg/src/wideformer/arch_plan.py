"""Architectures, parameter groups and width-scaling plans.

A plan assigns every parameter group three numbers: the variance of each of
its entries at initialization, a relative learning-rate factor for SGD and a
relative learning-rate factor for AdamW.  Plans are built symbolically as
monomials in the widths (``n``, ``n_patch``, ``n_out``, ``M``) so the same
object can be evaluated at a concrete architecture or printed as a table of
width powers.

The strategy axis is a single exponent ``s`` in ``[0, 1]``: ``s = 0`` keeps
the tangent kernel of order one (neural-tangent scaling), ``s = 1`` is the
maximal-update end, and ``s = 1/2`` sits halfway.  Non-head learning-rate
factors pick up ``n**s`` (SGD) or ``n**(s/2)`` (AdamW) while the head
initialization variance and the tied-embedding output rescale pick up
``n**-s``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Mapping

# ---------------------------------------------------------------------------
# Symbolic monomials
# ---------------------------------------------------------------------------

_SYMBOL_ORDER = ("n_patch", "n", "n_out", "M")


def _as_fraction(x: float | int | Fraction) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x).limit_denominator(10_000)


@dataclass(frozen=True)
class Scale:
    """A monomial ``coef * prod(symbol ** power)`` with exact rational powers."""

    coef: float = 1.0
    powers: tuple[tuple[str, Fraction], ...] = ()

    @staticmethod
    def of(coef: float = 1.0, **powers: float | Fraction) -> "Scale":
        return Scale(float(coef), ()).times(**powers)

    def times(self, **powers: float | Fraction) -> "Scale":
        merged = dict(self.powers)
        for sym, p in powers.items():
            if sym not in _SYMBOL_ORDER:
                raise ValueError(f"unknown width symbol {sym!r}")
            merged[sym] = merged.get(sym, Fraction(0)) + _as_fraction(p)
        ordered = tuple((s, merged[s]) for s in _SYMBOL_ORDER if merged.get(s, 0) != 0)
        return Scale(self.coef, ordered)

    def __mul__(self, other: "Scale | float") -> "Scale":
        if isinstance(other, Scale):
            return Scale(self.coef * other.coef, self.powers).times(**dict(other.powers))
        return Scale(self.coef * float(other), self.powers)

    __rmul__ = __mul__

    def sqrt(self) -> "Scale":
        return Scale(math.sqrt(self.coef), tuple((s, p / 2) for s, p in self.powers))

    def power(self, sym: str) -> Fraction:
        return dict(self.powers).get(sym, Fraction(0))

    def drop(self, sym: str) -> "Scale":
        return Scale(self.coef, tuple((s, p) for s, p in self.powers if s != sym))

    def evaluate(self, env: Mapping[str, float]) -> float:
        value = self.coef
        for sym, p in self.powers:
            value *= float(env[sym]) ** float(p)
        return value

    def render(self, literals: Mapping[str, int] | None = None) -> str:
        """Format as e.g. ``768^{-1}·n^{-1/2}``; symbols in ``literals`` print as numbers."""
        literals = literals or {}
        parts = []
        for sym, p in self.powers:
            base = str(literals[sym]) if sym in literals else sym
            parts.append(base if p == 1 else f"{base}^{{{p}}}")
        if not parts:
            return _format_number(self.coef)
        if abs(self.coef - 1.0) > 1e-15:
            parts.insert(0, _format_number(self.coef))
        return "·".join(parts)


def _format_number(x: float) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

MODALITIES = ("vision", "language")
BLOCK_KINDS = ("mhsa", "mhsa-masked", "mlp")
_BLOCK_ALIASES = {
    "mhsa": "mhsa",
    "mhsa-bidirectional": "mhsa",
    "bidirectional": "mhsa",
    "mhsa-masked": "mhsa-masked",
    "masked": "mhsa-masked",
    "mlp": "mlp",
}
POOLINGS = ("none", "token-mean")


@dataclass(frozen=True)
class ArchSpec:
    """A pre-LN residual Transformer at initialization.

    ``blocks`` is the ordered list of residual blocks between the stem and the
    head; ``depth`` is its length.  Layer norms carry no affine parameters
    (gain 1, shift 0) and every skip connection has gain 1.
    """

    modality: str
    n: int
    H: int
    T: int
    n_in: int
    n_out: int
    blocks: tuple[str, ...] = ("mhsa", "mlp")
    M: int = 4
    eps_ln: float = 1e-5
    activation: str = "gelu"
    pooling: str = "none"
    weight_tying: bool = False

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        blocks = tuple(_canonical_block(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        for name in ("n", "H", "T", "n_in", "n_out", "M"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.n % self.H != 0:
            raise ValueError(f"per-head channels n/H = {self.n}/{self.H} must be an integer")
        if not self.eps_ln >= 0.0:
            raise ValueError(f"eps_ln must be non-negative, got {self.eps_ln}")
        if self.activation not in ("relu", "gelu", "tanh", "identity"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.weight_tying and self.modality != "language":
            raise ValueError("weight_tying is only defined for the language modality")
        if self.modality == "language":
            if self.n_out != self.n_in:
                raise ValueError("language heads emit one logit per vocabulary entry: n_out must equal n_in")
            if self.pooling != "none":
                raise ValueError("token-mean pooling is only defined for the vision head")

    @property
    def C(self) -> int:
        """Channels per head."""
        return self.n // self.H

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def n_patch(self) -> int:
        return self.n_in

    @property
    def n_vocab(self) -> int:
        return self.n_in

    def widen(self, n: int, H: int | None = None) -> "ArchSpec":
        """Same architecture at width ``n`` (and optionally ``H`` heads)."""
        return replace(self, n=n, H=self.H if H is None else H)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["blocks"] = list(self.blocks)
        return out

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "ArchSpec":
        data = dict(data)
        known = {f.name for f in fields(ArchSpec)}
        pattern = list(data.pop("block_pattern", None) or ["mhsa", "mlp"])
        if "depth" in data:
            depth = int(data.pop("depth"))
            if "blocks" not in data:
                data["blocks"] = [pattern[i % len(pattern)] for i in range(depth)]
            elif len(data["blocks"]) != depth:
                raise ValueError(f"depth={depth} disagrees with {len(data['blocks'])} listed blocks")
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown architecture field(s): {sorted(unknown)}")
        if "blocks" in data:
            data["blocks"] = tuple(data["blocks"])
        return ArchSpec(**data)


def _canonical_block(kind: str) -> str:
    key = str(kind).strip().lower()
    if key not in _BLOCK_ALIASES:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    return _BLOCK_ALIASES[key]


class ParamGroup(str, Enum):
    """Parameter groups that share an initialization variance and learning-rate factor."""

    PATCH = "Patch"
    WORD_EMB = "WordEmb"
    POS_EMB = "PosEmb"
    Q = "Q"
    K = "K"
    V = "V"
    U = "U"
    W = "W"
    X = "X"
    HEAD_W = "HeadW"
    HEAD_B = "HeadB"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


HEAD_GROUPS = frozenset({ParamGroup.HEAD_W, ParamGroup.HEAD_B})
BULK_GROUPS = (ParamGroup.Q, ParamGroup.K, ParamGroup.V, ParamGroup.U, ParamGroup.W, ParamGroup.X)


def groups_for(arch: ArchSpec) -> tuple[ParamGroup, ...]:
    """Groups present in a plan for this architecture, in canonical order."""
    if arch.modality == "vision":
        return (ParamGroup.PATCH, ParamGroup.POS_EMB, *BULK_GROUPS, ParamGroup.HEAD_W, ParamGroup.HEAD_B)
    return (ParamGroup.WORD_EMB, ParamGroup.POS_EMB, *BULK_GROUPS)


# ---------------------------------------------------------------------------
# Strategy and constants
# ---------------------------------------------------------------------------

PRESETS: dict[str, Fraction | None] = {
    "standard": None,
    "neural-tangent": Fraction(0),
    "hybrid": Fraction(1, 2),
    "maximal-update": Fraction(1),
}
_PRESET_ALIASES = {
    "standard": "standard",
    "sp": "standard",
    "neural-tangent": "neural-tangent",
    "ntk": "neural-tangent",
    "hybrid": "hybrid",
    "maximal-update": "maximal-update",
    "mup": "maximal-update",
}


@dataclass(frozen=True)
class ScalingStrategy:
    """Where on the neural-tangent to maximal-update axis a plan sits.

    Either name a preset or give ``s`` directly (then ``preset`` is None).
    The ``standard`` preset is the uniform, width-agnostic recipe: every
    learning-rate factor is one and nothing is rescaled.
    """

    preset: str | None = "neural-tangent"
    s: Fraction | None = None
    ignore_mlp_multiplier: bool = False

    def __post_init__(self) -> None:
        preset = self.preset
        if preset is not None:
            key = str(preset).strip().lower()
            if key not in _PRESET_ALIASES:
                raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            preset = _PRESET_ALIASES[key]
            object.__setattr__(self, "preset", preset)
            implied = PRESETS[preset]
            if self.s is not None and implied is not None and _as_fraction(self.s) != implied:
                raise ValueError(f"preset {preset!r} implies s={implied}, got s={self.s}")
            if self.s is not None and implied is None:
                raise ValueError("the standard preset takes no exponent s")
            object.__setattr__(self, "s", implied)
        else:
            if self.s is None:
                raise ValueError("give either a preset or an explicit exponent s")
            s = _as_fraction(self.s)
            if not 0 <= s <= 1:
                raise ValueError(f"s must lie in [0, 1], got {self.s}")
            object.__setattr__(self, "s", s)

    @property
    def is_standard(self) -> bool:
        return self.preset == "standard"

    @property
    def exponent(self) -> Fraction:
        """The meta exponent; the standard preset initializes like ``s = 0``."""
        return Fraction(0) if self.s is None else self.s

    @property
    def label(self) -> str:
        return self.preset if self.preset is not None else f"s={self.s}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "preset": self.preset,
            "s": None if self.s is None else str(self.s),
            "ignore_mlp_multiplier": self.ignore_mlp_multiplier,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "ScalingStrategy":
        s = data.get("s")
        preset = data.get("preset")
        if preset is None and s is None:
            preset = "neural-tangent"
        if s is not None:
            s = Fraction(str(s)) if isinstance(s, str) else _as_fraction(s)
        return ScalingStrategy(preset=preset, s=s, ignore_mlp_multiplier=bool(data.get("ignore_mlp_multiplier", False)))


_DEFAULT_C = {
    "Patch": 1.0,
    "WordEmb": 1.0,
    "PosEmb": 0.02 ** 2,
    "Q": 0.5,
    "K": 0.5,
    "V": 0.5,
    "U": 1.0 / 3.0,
    "W": 0.4,
    "X": 1.6,
    "HeadW": 1.0,
}


def _all_ones() -> dict[str, float]:
    return {g.value: 1.0 for g in ParamGroup}


@dataclass(frozen=True)
class Constants:
    """Order-one constants: initialization ``C``, SGD ``Lam`` and AdamW ``Lam_tilde``.

    ``standard_std`` is the flat initialization scale used by the standard
    preset for language models.
    """

    C: Mapping[str, float] = field(default_factory=lambda: dict(_DEFAULT_C))
    Lam: Mapping[str, float] = field(default_factory=_all_ones)
    Lam_tilde: Mapping[str, float] = field(default_factory=_all_ones)
    standard_std: float = 0.02

    def __post_init__(self) -> None:
        C = dict(_DEFAULT_C)
        C.update(self.C)
        Lam = _all_ones()
        Lam.update(self.Lam)
        Lam_tilde = _all_ones()
        Lam_tilde.update(self.Lam_tilde)
        valid = {g.value for g in ParamGroup}
        for label, table in (("C", C), ("Lam", Lam), ("Lam_tilde", Lam_tilde)):
            for key, value in table.items():
                if key not in valid:
                    raise ValueError(f"{label}: unknown parameter group {key!r}")
                if not (value >= 0.0) or math.isinf(value):
                    raise ValueError(f"{label}[{key}] must be a finite non-negative number, got {value}")
        if "HeadB" in C and C["HeadB"] != 0.0:
            raise ValueError("head biases start at zero; C['HeadB'] must be 0 or absent")
        C.pop("HeadB", None)
        if not self.standard_std >= 0.0:
            raise ValueError("standard_std must be non-negative")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Lam", Lam)
        object.__setattr__(self, "Lam_tilde", Lam_tilde)

    def to_dict(self) -> dict[str, Any]:
        return {
            "C": dict(self.C),
            "Lam": dict(self.Lam),
            "Lam_tilde": dict(self.Lam_tilde),
            "standard_std": self.standard_std,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "Constants":
        return Constants(
            C=dict(data.get("C", {})),
            Lam=dict(data.get("Lam", {})),
            Lam_tilde=dict(data.get("Lam_tilde", {})),
            standard_std=float(data.get("standard_std", 0.02)),
        )


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

G = ParamGroup
ONE = Scale()


def _width_env(arch: ArchSpec) -> dict[str, float]:
    return {"n": arch.n, "n_patch": arch.n_in, "n_out": arch.n_out, "M": arch.M}


def symbolic_init_plan(arch: ArchSpec, strategy: ScalingStrategy, constants: Constants) -> dict[ParamGroup, Scale]:
    """Initialization variance of each entry, as a monomial in the widths."""
    s = strategy.exponent
    C = constants.C
    if strategy.is_standard and arch.modality == "language":
        flat = Scale.of(constants.standard_std ** 2)
        return {g: flat for g in groups_for(arch)}
    plan: dict[ParamGroup, Scale] = {}
    if arch.modality == "vision":
        plan[G.PATCH] = Scale.of(C["Patch"], n_patch=-1)
    else:
        plan[G.WORD_EMB] = Scale.of(C["WordEmb"])
    plan[G.POS_EMB] = Scale.of(C["PosEmb"])
    for g in (G.Q, G.K, G.V, G.U, G.W):
        plan[g] = Scale.of(C[g.value], n=-1)
    plan[G.X] = Scale.of(C["X"], n=-1, M=-1)
    if arch.modality == "vision":
        plan[G.HEAD_W] = Scale.of(C["HeadW"], n=-(1 + s))
        plan[G.HEAD_B] = Scale.of(0.0)
    return plan


def symbolic_output_rescale(arch: ArchSpec, strategy: ScalingStrategy) -> Scale:
    if arch.modality != "language" or strategy.is_standard:
        return ONE
    return Scale.of(1.0, n=-(1 + strategy.exponent) / 2)


def symbolic_lr_plan(
    arch: ArchSpec, optimizer: str, strategy: ScalingStrategy, constants: Constants
) -> dict[ParamGroup, Scale]:
    """Relative learning-rate factor of each group, as a monomial in the widths."""
    opt = optimizer.strip().lower()
    if opt not in ("sgd", "adamw"):
        raise ValueError(f"unknown optimizer {optimizer!r}; expected 'sgd' or 'adamw'")
    groups = groups_for(arch)
    if strategy.is_standard:
        return {g: ONE for g in groups}
    s = strategy.exponent
    m_power = 0 if strategy.ignore_mlp_multiplier else -1
    plan: dict[ParamGroup, Scale] = {}
    if opt == "sgd":
        L = constants.Lam
        base = {
            G.PATCH: Scale.of(L["Patch"], n_patch=-1),
            G.WORD_EMB: Scale.of(L["WordEmb"]),
            G.POS_EMB: Scale.of(L["PosEmb"]),
            G.Q: Scale.of(L["Q"], n=-1),
            G.K: Scale.of(L["K"], n=-1),
            G.V: Scale.of(L["V"], n=-1),
            G.U: Scale.of(L["U"], n=-1),
            G.W: Scale.of(L["W"], n=-1),
            G.X: Scale.of(L["X"], n=-1, M=m_power),
            G.HEAD_W: Scale.of(L["HeadW"], n=-1),
            G.HEAD_B: Scale.of(L["HeadB"]),
        }
        boost = s
    else:
        L = constants.Lam_tilde
        half = Fraction(1, 2)
        base = {
            G.PATCH: Scale.of(L["Patch"], n_patch=-1, n=-half),
            G.WORD_EMB: Scale.of(L["WordEmb"], n=-half),
            G.POS_EMB: Scale.of(L["PosEmb"], n=-half),
            G.Q: Scale.of(L["Q"], n=-3 * half),
            G.K: Scale.of(L["K"], n=-3 * half),
            G.V: Scale.of(L["V"], n=-3 * half),
            G.U: Scale.of(L["U"], n=-3 * half),
            G.W: Scale.of(L["W"], n=-3 * half, M=m_power * half),
            G.X: Scale.of(L["X"], n=-3 * half, M=m_power),
            G.HEAD_W: Scale.of(L["HeadW"], n=-1, n_out=-half),
            G.HEAD_B: Scale.of(L["HeadB"], n_out=-half),
        }
        boost = s / 2
    for g in groups:
        entry = base[g]
        if g not in HEAD_GROUPS and boost != 0:
            entry = entry.times(n=boost)
        plan[g] = entry
    return plan


def make_init_plan(
    arch: ArchSpec, strategy: ScalingStrategy, constants: Constants | None = None
) -> dict[ParamGroup, float]:
    """Per-entry initialization variance of every group, evaluated at ``arch``."""
    constants = constants or Constants()
    env = _width_env(arch)
    return {g: v.evaluate(env) for g, v in symbolic_init_plan(arch, strategy, constants).items()}


def make_lr_plan(
    arch: ArchSpec, optimizer: str, strategy: ScalingStrategy, constants: Constants | None = None
) -> dict[ParamGroup, float]:
    """Relative learning-rate factors for ``optimizer`` ('sgd' or 'adamw'), evaluated at ``arch``."""
    constants = constants or Constants()
    env = _width_env(arch)
    return {g: v.evaluate(env) for g, v in symbolic_lr_plan(arch, optimizer, strategy, constants).items()}


def output_rescale(arch: ArchSpec, strategy: ScalingStrategy) -> float:
    """Multiplier on the tied word-embedding readout; 1 for vision and for the standard preset."""
    return symbolic_output_rescale(arch, strategy).evaluate(_width_env(arch))


@dataclass(frozen=True)
class EffectiveConstants:
    """Width-free constants that the infinite-width recursions consume.

    They are read off a concrete plan by multiplying each variance or
    learning-rate factor with the fan-in that multiplies it in the network,
    so any plan (including hand-edited ones) maps onto the theory.
    """

    C_emb: float
    C_PE: float
    C_Q: float
    C_K: float
    C_V: float
    C_U: float
    C_W: float
    C_X: float
    C_head: float
    Lam: Mapping[str, float]


@dataclass(frozen=True)
class ScalingPlan:
    """Numbers a finite-width model needs: variances, both lr-factor tables, readout rescale."""

    arch: ArchSpec
    strategy: ScalingStrategy
    constants: Constants
    init_var: Mapping[str, float]
    sgd_factor: Mapping[str, float]
    adamw_factor: Mapping[str, float]
    output_rescale: float
    symbolic: Mapping[str, Mapping[str, Scale]] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        for label in ("init_var", "sgd_factor", "adamw_factor"):
            table = getattr(self, label)
            for key, value in table.items():
                if not (value >= 0.0) or math.isinf(value):
                    raise ValueError(f"{label}[{key}] must be finite and non-negative, got {value}")
        if self.init_var.get("HeadB", 0.0) != 0.0:
            raise ValueError("head biases must start at zero")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.init_var)

    def lr_factor(self, optimizer: str) -> Mapping[str, float]:
        opt = optimizer.strip().lower()
        if opt == "sgd":
            return self.sgd_factor
        if opt == "adamw":
            return self.adamw_factor
        raise ValueError(f"unknown optimizer {optimizer!r}")

    def with_factor(self, optimizer: str, group: str, value: float) -> "ScalingPlan":
        """Copy of the plan with one learning-rate factor overridden (for contrast runs)."""
        label = "sgd_factor" if optimizer.lower() == "sgd" else "adamw_factor"
        table = dict(getattr(self, label))
        table[group] = float(value)
        return replace(self, **{label: table})

    def effective(self) -> EffectiveConstants:
        a = self.arch
        v = self.init_var
        lam = self.sgd_factor
        r2 = self.output_rescale ** 2
        if a.modality == "vision":
            C_emb = v["Patch"] * a.n_in
            C_head = v["HeadW"] * a.n
            L = {
                "Patch": lam["Patch"] * a.n_in,
                "HeadW": lam["HeadW"] * a.n,
                "HeadB": lam["HeadB"],
            }
        else:
            C_emb = v["WordEmb"]
            C_head = r2 * a.n * v["WordEmb"]
            L = {
                "WordEmb": lam["WordEmb"],
                "WordEmbHead": lam["WordEmb"] * r2 * a.n,
            }
        L["PosEmb"] = lam["PosEmb"]
        for g in ("Q", "K", "V", "U", "W"):
            L[g] = lam[g] * a.n
        L["X"] = lam["X"] * a.M * a.n
        return EffectiveConstants(
            C_emb=C_emb,
            C_PE=v["PosEmb"],
            C_Q=v["Q"] * a.n,
            C_K=v["K"] * a.n,
            C_V=v["V"] * a.n,
            C_U=v["U"] * a.n,
            C_W=v["W"] * a.n,
            C_X=v["X"] * a.M * a.n,
            C_head=C_head,
            Lam=L,
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        groups = {}
        for g in self.init_var:
            groups[g] = {
                "init_var": self.init_var[g],
                "sgd_factor": self.sgd_factor[g],
                "adamw_factor": self.adamw_factor[g],
            }
        return {
            "arch": self.arch.to_dict(),
            "strategy": self.strategy.to_dict(),
            "constants": self.constants.to_dict(),
            "output_rescale": self.output_rescale,
            "groups": groups,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "ScalingPlan":
        groups = data["groups"]
        return ScalingPlan(
            arch=ArchSpec.from_dict(data["arch"]),
            strategy=ScalingStrategy.from_dict(data["strategy"]),
            constants=Constants.from_dict(data["constants"]),
            init_var={g: float(e["init_var"]) for g, e in groups.items()},
            sgd_factor={g: float(e["sgd_factor"]) for g, e in groups.items()},
            adamw_factor={g: float(e["adamw_factor"]) for g, e in groups.items()},
            output_rescale=float(data["output_rescale"]),
        )

    @staticmethod
    def from_json(text: str) -> "ScalingPlan":
        return ScalingPlan.from_dict(json.loads(text))


def build_plan(
    arch: ArchSpec,
    strategy: ScalingStrategy | str = "neural-tangent",
    constants: Constants | None = None,
) -> ScalingPlan:
    """Assemble initialization, SGD and AdamW tables plus the readout rescale."""
    if isinstance(strategy, str):
        strategy = ScalingStrategy(preset=strategy)
    constants = constants or Constants()
    env = _width_env(arch)
    init = symbolic_init_plan(arch, strategy, constants)
    sgd = symbolic_lr_plan(arch, "sgd", strategy, constants)
    adamw = symbolic_lr_plan(arch, "adamw", strategy, constants)
    rescale = symbolic_output_rescale(arch, strategy)
    symbolic = {
        g.value: {"init_var": init[g], "sgd_factor": sgd[g], "adamw_factor": adamw[g]} for g in init
    }
    return ScalingPlan(
        arch=arch,
        strategy=strategy,
        constants=constants,
        init_var={g.value: init[g].evaluate(env) for g in init},
        sgd_factor={g.value: sgd[g].evaluate(env) for g in init},
        adamw_factor={g.value: adamw[g].evaluate(env) for g in init},
        output_rescale=rescale.evaluate(env),
        symbolic={**symbolic, "_rescale": {"output_rescale": rescale}},
    )


# ---------------------------------------------------------------------------
# Human-readable tables
# ---------------------------------------------------------------------------

TABLE_ROWS = {
    "Patch": "patchify weights",
    "WordEmb": "word embedding",
    "PosEmb": "positional embedding",
    "Q": "Q weights",
    "K": "K weights",
    "V": "V weights",
    "U": "U weights",
    "W": "W weights",
    "X": "X weights",
    "HeadW": "head weights",
    "HeadB": "head biases",
}


@dataclass(frozen=True)
class TableRow:
    group: str
    label: str
    init_std: Scale
    lr_factor: Scale

    def render(self, literals: Mapping[str, int]) -> str:
        return f"{self.label}: std {self.init_std.render(literals)}, lr factor {self.lr_factor.render(literals)}"


def plan_table(plan: ScalingPlan, optimizer: str = "adamw") -> list[TableRow]:
    """Rows of (group, initial std, relative lr factor) as width monomials.

    Pass :func:`table_literals` to :meth:`TableRow.render` to print
    ``n_patch``, ``n_out`` and ``M`` as numbers while ``n`` stays symbolic.
    """
    if plan.symbolic is None:
        raise ValueError("plan carries no symbolic form; rebuild it with build_plan")
    key = "sgd_factor" if optimizer.lower() == "sgd" else "adamw_factor"
    rows = []
    for g in plan.init_var:
        entry = plan.symbolic[g]
        rows.append(TableRow(g, TABLE_ROWS[g], entry["init_var"].sqrt(), entry[key]))
    return rows


def table_literals(arch: ArchSpec) -> dict[str, int]:
    """Numeric values to substitute for the non-embedding widths in a rendered table."""
    return {"n_patch": arch.n_in, "n_out": arch.n_out, "M": arch.M}
