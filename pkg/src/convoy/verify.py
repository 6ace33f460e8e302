"""Client-side check of the server's product with one secret random row vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import FLOAT, INT, OpCounter, as_matrix, matmul


@dataclass(frozen=True)
class TolerancePolicy:
    """Per-column acceptance band ``|lhs - rhs| <= abs_eps + rel_eps * (|lhs| + |rhs|)``."""

    abs_eps: float = 0.0
    rel_eps: float = 0.0

    def __post_init__(self):
        if self.abs_eps < 0 or self.rel_eps < 0:
            raise ValueError("tolerances must be non-negative")

    @classmethod
    def exact(cls) -> TolerancePolicy:
        return cls(0.0, 0.0)

    @classmethod
    def float_default(cls) -> TolerancePolicy:
        return cls(abs_eps=1e-6, rel_eps=1e-9)

    @property
    def is_exact(self) -> bool:
        return self.abs_eps == 0 and self.rel_eps == 0


def _row(vec, length: int | None = None, name: str = "vector") -> np.ndarray:
    vec = np.asarray(vec)
    if vec.ndim == 2 and vec.shape[0] == 1:
        vec = vec[0]
    if vec.ndim != 1:
        raise ValueError(f"{name} must be a row vector, got shape {vec.shape}")
    if length is not None and vec.shape[0] != length:
        raise ValueError(f"{name} has length {vec.shape[0]}, expected {length}")
    return vec


def make_verification_tag(r, wbar, counter: OpCounter | None = None) -> np.ndarray:
    """Verification vector ``v = r @ wbar`` of length c_in*k*k."""
    wbar = as_matrix(wbar)
    r = _row(r, wbar.shape[0], "r")
    return matmul(r.reshape(1, -1).astype(wbar.dtype), wbar, counter)[0]


def verify(ybar_prime, xbar_prime, r, tag, tol: TolerancePolicy | None = None,
           counter: OpCounter | None = None) -> bool:
    """Accept the returned product iff ``r @ ybar_prime == tag @ xbar_prime`` column by column.

    Integer matrices are compared exactly whatever ``tol`` says.
    """
    ybar_prime = as_matrix(ybar_prime)
    xbar_prime = as_matrix(xbar_prime)
    if ybar_prime.dtype != xbar_prime.dtype:
        raise TypeError("result and blinded input use different arithmetic modes")
    if ybar_prime.shape[1] != xbar_prime.shape[1]:
        raise ValueError(f"column mismatch: {ybar_prime.shape} vs {xbar_prime.shape}")
    dtype = ybar_prime.dtype
    r = _row(r, ybar_prime.shape[0], "r").astype(dtype).reshape(1, -1)
    v = _row(tag, xbar_prime.shape[0], "verification tag").astype(dtype).reshape(1, -1)
    lhs = matmul(r, ybar_prime, counter)[0]
    rhs = matmul(v, xbar_prime, counter)[0]
    if dtype == INT or tol is None or tol.is_exact:
        return bool(np.array_equal(lhs, rhs))
    lhs = lhs.astype(FLOAT)
    rhs = rhs.astype(FLOAT)
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        return False
    band = tol.abs_eps + tol.rel_eps * (np.abs(lhs) + np.abs(rhs))
    return bool(np.all(np.abs(lhs - rhs) <= band))
