"""Symmetric matrices indexed by (sample, token) pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROLES = ("G", "F", "Theta")


@dataclass(frozen=True)
class PairKernel:
    """A dense kernel over the flattened index ``p = alpha * T + t``.

    ``role`` tags what the matrix means: ``"G"`` a preactivation kernel,
    ``"F"`` the kernel of layer-normalized signals, ``"Theta"`` a tangent
    kernel.  The matrix is stored exactly symmetric.
    """

    matrix: np.ndarray
    B: int
    T: int
    role: str = "G"

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        P = self.B * self.T
        if m.shape != (P, P):
            raise ValueError(f"expected a {P}x{P} matrix for B={self.B}, T={self.T}; got {m.shape}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not np.all(np.isfinite(m)):
            raise ValueError(f"{self.role} kernel has non-finite entries")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def P(self) -> int:
        return self.B * self.T

    @property
    def diag(self) -> np.ndarray:
        return np.diagonal(self.matrix)

    def block4(self) -> np.ndarray:
        """View as ``(B, T, B, T)`` so that ``K[a, t, b, u]`` is the (a;t),(b;u) entry."""
        return self.matrix.reshape(self.B, self.T, self.B, self.T)

    def with_matrix(self, matrix: np.ndarray, role: str | None = None) -> "PairKernel":
        return PairKernel(matrix, self.B, self.T, self.role if role is None else role)

    def token_delta(self) -> np.ndarray:
        """The matrix ``delta(t1, t2)`` on the same index set (samples ignored)."""
        t = np.tile(np.arange(self.T), self.B)
        return (t[:, None] == t[None, :]).astype(float)

    def pooled(self) -> np.ndarray:
        """Token-mean pooled ``B x B`` kernel, ``(1/T^2) sum_{t1,t2} K``."""
        return self.block4().mean(axis=(1, 3))


def from_block4(block: np.ndarray, role: str = "G") -> PairKernel:
    B, T = block.shape[:2]
    return PairKernel(block.reshape(B * T, B * T), B, T, role)
