"""The server's product W̄ X̄' and the cheating strategies used to exercise verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import INT, OpCounter, as_matrix, matmul

BEHAVIORS = ("honest", "tamper-one", "tamper-sparse", "scale-all", "random-matrix", "lazy-zero")
CHEATING = BEHAVIORS[1:]


@dataclass(frozen=True)
class ServerBehavior:
    """What the server returns.

    ``count`` is the number of entries hit by ``tamper-sparse``; ``scale`` is
    the factor for ``scale-all``; ``lambda1`` sets the offset range 2**lambda1
    for the tampering kinds, drawn the same way as client masks.
    """

    kind: str = "honest"
    count: int = 2
    scale: float = 2
    lambda1: int = 16

    def __post_init__(self):
        if self.kind not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.kind!r}; choose from {', '.join(BEHAVIORS)}")
        if self.count < 1:
            raise ValueError("tamper count must be >= 1")
        if self.scale == 1:
            raise ValueError("scale constant must differ from 1")

    @classmethod
    def parse(cls, text: str, lambda1: int = 16) -> ServerBehavior:
        """Parse ``kind[:param]``, e.g. ``tamper-sparse:5`` or ``scale-all:3``."""
        kind, _, arg = text.partition(":")
        if not arg:
            return cls(kind, lambda1=lambda1)
        if kind == "tamper-sparse":
            return cls(kind, count=int(arg), lambda1=lambda1)
        if kind == "scale-all":
            return cls(kind, scale=float(arg), lambda1=lambda1)
        raise ValueError(f"behavior {kind!r} takes no parameter")

    def __str__(self):
        if self.kind == "tamper-sparse":
            return f"{self.kind}:{self.count}"
        if self.kind == "scale-all":
            return f"{self.kind}:{self.scale:g}"
        return self.kind


def compute(wbar, xbar_prime, counter: OpCounter | None = None) -> np.ndarray:
    """Honest server work: Ȳ' = W̄ X̄'."""
    return matmul(wbar, xbar_prime, counter)


def _offsets(rng: np.random.Generator, size: int, lambda1: int, dtype) -> np.ndarray:
    sign = np.where(rng.integers(0, 2, size=size) == 1, 1, -1)
    if dtype == INT:
        return (sign * rng.integers(1, 2**lambda1, size=size)).astype(INT)
    return sign * rng.uniform(1.0, float(2**lambda1), size=size)


def adversary_compute(wbar, xbar_prime, behavior: ServerBehavior, rng: np.random.Generator,
                      counter: OpCounter | None = None) -> np.ndarray:
    """Honest product, then corrupted according to ``behavior``.

    Every cheating kind returns something different from the honest product.
    Where a kind would coincide with it (scaling or zeroing an all-zero
    product) one entry is bumped by a nonzero offset instead.
    """
    wbar = as_matrix(wbar)
    honest = compute(wbar, xbar_prime, counter)
    kind = behavior.kind
    if kind == "honest":
        return honest
    out = honest.copy()
    flat = out.reshape(-1)
    if kind == "tamper-one":
        idx = rng.integers(flat.size)
        flat[idx] += _offsets(rng, 1, behavior.lambda1, out.dtype)[0]
    elif kind == "tamper-sparse":
        t = min(behavior.count, flat.size)
        idx = rng.choice(flat.size, size=t, replace=False)
        flat[idx] += _offsets(rng, t, behavior.lambda1, out.dtype)
    elif kind == "scale-all":
        scale = behavior.scale
        if out.dtype == INT:
            if scale != int(scale):
                raise ValueError("exact mode needs an integer scale constant")
            scale = int(scale)
        out = honest * scale
    elif kind == "random-matrix":
        bound = int(np.max(np.abs(honest))) + 1 if honest.dtype == INT else float(np.max(np.abs(honest))) + 1.0
        while True:
            if out.dtype == INT:
                out = rng.integers(-bound, bound + 1, size=honest.shape, dtype=np.int64)
            else:
                out = rng.uniform(-bound, bound, size=honest.shape)
            if not np.array_equal(out, honest):
                break
    elif kind == "lazy-zero":
        out = np.zeros_like(honest)
    if np.array_equal(out, honest):
        out = honest.copy()
        out.reshape(-1)[0] += _offsets(rng, 1, behavior.lambda1, out.dtype)[0]
    return out
