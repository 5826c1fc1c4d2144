"""Pointwise activations and their first derivatives.

GELU uses the exact error-function form, x * Phi(x), never the tanh
approximation, so the simulator and the Gaussian integrals agree.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import ndtr

Array = np.ndarray

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_prime(x: Array) -> Array:
    return (np.asarray(x) > 0.0).astype(float)


def gelu(x: Array) -> Array:
    return x * ndtr(x)


def gelu_prime(x: Array) -> Array:
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def tanh(x: Array) -> Array:
    return np.tanh(x)


def tanh_prime(x: Array) -> Array:
    return 1.0 - np.tanh(x) ** 2


def identity(x: Array) -> Array:
    return np.asarray(x, dtype=float)


def identity_prime(x: Array) -> Array:
    return np.ones_like(np.asarray(x, dtype=float))


ACTIVATIONS: dict[str, tuple[Callable[[Array], Array], Callable[[Array], Array]]] = {
    "relu": (relu, relu_prime),
    "gelu": (gelu, gelu_prime),
    "tanh": (tanh, tanh_prime),
    "identity": (identity, identity_prime),
}


def resolve(tag: str | Callable[[Array], Array]) -> Callable[[Array], Array]:
    """Turn a tag such as ``"gelu"`` or ``"gelu'"`` into a vectorized callable.

    A trailing apostrophe selects the derivative.  Callables pass through.
    """
    if callable(tag):
        return tag
    name = tag.strip().lower()
    derivative = name.endswith("'")
    name = name.rstrip("'")
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {tag!r}; expected one of {sorted(ACTIVATIONS)}")
    return ACTIVATIONS[name][1 if derivative else 0]
