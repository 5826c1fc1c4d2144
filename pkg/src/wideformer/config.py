"""TOML run configuration.

A config names one architecture, one scaling strategy and the knobs of the
Monte-Carlo checks.  Every section except ``[arch]`` is optional::

    [arch]
    modality = "vision"        # or "language"
    n = 128
    H = 4
    T = 3
    n_in = 8                   # n_patch (vision) or n_vocab (language)
    n_out = 4
    blocks = ["mhsa", "mlp"]   # or: depth = 4, block_pattern = ["mhsa", "mlp"]

    [strategy]
    preset = "neural-tangent"  # or s = 0.5

    [constants.C]
    Q = 0.5

    [run]
    optimizer = "adamw"
    widths = [128, 256, 512]
    n_inits = 64               # omit for the per-check defaults

    [overrides.adamw]          # replace single lr factors, e.g. for contrast runs
    PosEmb = 1.0

Parse and validation failures raise :class:`ConfigError`, whose message
carries the offending field and, when it can be located, its line.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .arch_plan import ArchSpec, Constants, ScalingStrategy, groups_for

OPTIMIZERS = ("sgd", "adamw")

DEFAULT_TOLERANCES = {
    "fd_rel": 1e-6,
    "kernel_ratio": 0.6,
    "diag_z": 5.0,
    "ln_abs": 1e-12,
    "ln_z": 3.0,
    "eightfold_band": 2.0,
    "wick_z": 4.0,
    "ntk_z": 1.0,
    "ntk_slack": 10.0,
    "grad_ratio": 0.2,
    "flatness": 1.5,
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and line when known."""


@dataclass(frozen=True)
class InputSpec:
    """How the probe batch is made: random draws or explicit data."""

    batch: int = 2
    seed: int = 0
    data: tuple | None = None

    def make(self, arch: ArchSpec) -> np.ndarray:
        if self.data is not None:
            x = np.asarray(self.data)
            if arch.modality == "language":
                x = x.astype(np.int64)
            else:
                x = x.astype(float)
            return x
        rng = np.random.default_rng(self.seed)
        if arch.modality == "vision":
            return rng.standard_normal((self.batch, arch.T, arch.n_patch))
        # leave the upper half of the vocabulary unused so that clean output
        # channels remain for the tangent-kernel comparison
        high = max(1, arch.n_vocab // 2)
        return rng.integers(0, high, size=(self.batch, arch.T))


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSpec
    strategy: ScalingStrategy = field(default_factory=ScalingStrategy)
    constants: Constants = field(default_factory=Constants)
    optimizer: str = "adamw"
    widths: tuple[int, ...] = (128, 256, 512)
    n_inits: int | None = None
    seed: int = 0
    n_samples: int = 16384
    replicates: int = 2
    lr: float = 1e-3
    inputs: InputSpec = field(default_factory=InputSpec)
    out: str | None = None
    tolerances: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    overrides: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"run.optimizer: expected one of {OPTIMIZERS}, got {self.optimizer!r}")
        if len(self.widths) == 0 or any(int(w) != w or w <= 0 for w in self.widths):
            raise ConfigError("run.widths: expected a list of positive integers")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"run.widths: must be strictly increasing, got {list(self.widths)}")
        for k, v in self.tolerances.items():
            if not v > 0:
                raise ConfigError(f"tolerances.{k}: must be positive, got {v}")
        if self.n_inits is not None and self.n_inits < 1:
            raise ConfigError("run.n_inits: must be at least 1")
        if self.n_samples < 2:
            raise ConfigError("run.n_samples: must be at least 2")
        if self.replicates < 1:
            raise ConfigError("run.replicates: must be at least 1")
        if not self.lr > 0:
            raise ConfigError("run.lr: must be positive")
        for opt, table in self.overrides.items():
            if opt not in OPTIMIZERS:
                raise ConfigError(f"overrides.{opt}: expected one of {OPTIMIZERS}")
            for g, v in table.items():
                if g not in self.arch_groups:
                    raise ConfigError(f"overrides.{opt}: unknown group {g!r} (expected one of {sorted(self.arch_groups)})")
                if not (v >= 0 and np.isfinite(v)):
                    raise ConfigError(f"overrides.{opt}: factor for {g} must be finite and non-negative")

    @property
    def arch_groups(self) -> tuple[str, ...]:
        return tuple(g.value for g in groups_for(self.arch))

    def with_widths(self, widths: tuple[int, ...]) -> "RunConfig":
        return replace(self, widths=tuple(widths))

    def batch(self) -> np.ndarray:
        return self.inputs.make(self.arch)


def _locate(text: str, section: str, key: str) -> int | None:
    """Line number of ``key = ...`` inside ``[section]``, if it can be found."""
    current = ""
    head = re.compile(r"^\s*\[+\s*([^\]]+?)\s*\]+\s*$")
    assign = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), start=1):
        m = head.match(line)
        if m:
            current = m.group(1)
            continue
        if current == section and assign.match(line):
            return i
    return None


def _fail(text: str, section: str, key: str, msg: str) -> ConfigError:
    line = _locate(text, section, key)
    where = f" (line {line})" if line else ""
    return ConfigError(f"{section}.{key}{where}: {msg}")


_ARCH_KEYS = {
    "modality", "n", "H", "T", "n_in", "n_out", "blocks", "depth", "block_pattern",
    "M", "eps_ln", "activation", "pooling", "weight_tying",
}
_RUN_KEYS = {"optimizer", "widths", "n_inits", "seed", "n_samples", "replicates", "lr", "out"}
_INPUT_KEYS = {"batch", "seed", "data"}
_TOP_KEYS = {"arch", "strategy", "constants", "run", "inputs", "tolerances", "overrides"}


def _unknown(text: str, section: str, table: Mapping[str, Any], allowed: set[str]) -> None:
    for k in table:
        if k not in allowed:
            raise _fail(text, section, k, f"unknown field (expected one of {sorted(allowed)})")


def _typed(text: str, section: str, table: Mapping[str, Any], key: str, kind, default):
    if key not in table:
        return default
    v = table[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise _fail(text, section, key, f"expected an integer, got {v!r}")
    if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise _fail(text, section, key, f"expected a number, got {v!r}")
    if kind is str and not isinstance(v, str):
        raise _fail(text, section, key, f"expected a string, got {v!r}")
    return kind(v)


def parse_config(text: str) -> RunConfig:
    """Build a :class:`RunConfig` from TOML text."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    for k in data:
        if k not in _TOP_KEYS:
            raise ConfigError(f"{k}: unknown section (expected one of {sorted(_TOP_KEYS)})")
    if "arch" not in data:
        raise ConfigError("arch: missing required section [arch]")
    arch_tab = data["arch"]
    _unknown(text, "arch", arch_tab, _ARCH_KEYS)
    missing = [k for k in ("modality", "n", "H", "T", "n_in", "n_out") if k not in arch_tab]
    if missing:
        raise ConfigError(f"arch: missing required field(s) {missing}")
    try:
        arch = ArchSpec.from_dict(arch_tab)
    except (KeyError, TypeError, ValueError) as exc:
        key = _guess_key(str(exc), arch_tab)
        raise _fail(text, "arch", key, str(exc).strip("'\"")) from None

    strat_tab = data.get("strategy", {})
    try:
        strategy = ScalingStrategy.from_dict(strat_tab)
    except (KeyError, TypeError, ValueError) as exc:
        key = _guess_key(str(exc), strat_tab) if strat_tab else "preset"
        raise _fail(text, "strategy", key, str(exc).strip("'\"")) from None

    try:
        constants = Constants.from_dict(data.get("constants", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"constants: {exc}") from None

    run = data.get("run", {})
    _unknown(text, "run", run, _RUN_KEYS)
    widths = run.get("widths", [128, 256, 512])
    if not isinstance(widths, list) or not all(isinstance(w, int) and not isinstance(w, bool) for w in widths):
        raise _fail(text, "run", "widths", f"expected a list of integers, got {widths!r}")
    inp = data.get("inputs", {})
    _unknown(text, "inputs", inp, _INPUT_KEYS)
    inputs = InputSpec(
        batch=_typed(text, "inputs", inp, "batch", int, 2),
        seed=_typed(text, "inputs", inp, "seed", int, 0),
        data=_freeze(inp["data"]) if "data" in inp else None,
    )
    if inputs.batch < 1:
        raise _fail(text, "inputs", "batch", "must be at least 1")

    tol = dict(DEFAULT_TOLERANCES)
    for k, v in data.get("tolerances", {}).items():
        if k not in DEFAULT_TOLERANCES:
            raise _fail(text, "tolerances", k, f"unknown tolerance (expected one of {sorted(DEFAULT_TOLERANCES)})")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise _fail(text, "tolerances", k, f"expected a number, got {v!r}")
        tol[k] = float(v)

    overrides = {}
    for opt, table in data.get("overrides", {}).items():
        if not isinstance(table, dict):
            raise ConfigError(f"overrides.{opt}: expected a table of group = factor")
        for g, v in table.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise _fail(text, f"overrides.{opt}", g, f"expected a number, got {v!r}")
        overrides[opt] = {g: float(v) for g, v in table.items()}

    try:
        cfg = RunConfig(
            arch=arch,
            strategy=strategy,
            constants=constants,
            optimizer=_typed(text, "run", run, "optimizer", str, "adamw").lower(),
            widths=tuple(widths),
            n_inits=_typed(text, "run", run, "n_inits", int, None),
            seed=_typed(text, "run", run, "seed", int, 0),
            n_samples=_typed(text, "run", run, "n_samples", int, 16384),
            replicates=_typed(text, "run", run, "replicates", int, 2),
            lr=_typed(text, "run", run, "lr", float, 1e-3),
            inputs=inputs,
            out=_typed(text, "run", run, "out", str, None),
            tolerances=tol,
            overrides=overrides,
        )
    except ConfigError as exc:
        msg = str(exc)
        m = re.match(r"(\w+)\.(\w+): (.*)", msg, re.S)
        if m:
            raise _fail(text, m.group(1), m.group(2), m.group(3)) from None
        raise
    if inputs.data is not None:
        _check_data(text, cfg)
    return cfg


def _check_data(text: str, cfg: RunConfig) -> None:
    try:
        x = cfg.batch()
    except (TypeError, ValueError) as exc:
        raise _fail(text, "inputs", "data", f"not a rectangular numeric array ({exc})") from None
    arch = cfg.arch
    want = "(B, T, n_patch)" if arch.modality == "vision" else "(B, T)"
    ndim = 3 if arch.modality == "vision" else 2
    if x.ndim != ndim or x.shape[1] != arch.T or (ndim == 3 and x.shape[2] != arch.n_patch):
        raise _fail(text, "inputs", "data", f"expected shape {want} matching the architecture, got {x.shape}")
    if arch.modality == "language" and (x.min() < 0 or x.max() >= arch.n_vocab):
        raise _fail(text, "inputs", "data", f"token ids must lie in [0, {arch.n_vocab})")


def _freeze(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    return v


def _guess_key(message: str, table: Mapping[str, Any]) -> str:
    """Pick the config key an error message most likely refers to."""
    for k in sorted(table, key=len, reverse=True):
        if re.search(rf"\b{re.escape(k)}\b", message):
            return k
    m = re.search(r"'(\w+)'", message)
    return m.group(1) if m else next(iter(table), "?")


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from None
