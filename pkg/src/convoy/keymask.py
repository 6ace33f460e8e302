"""Security parameters, mask precomputation, key generation, blinding and recovery.

The client draws a pool of random masks R_1..R_L once per layer and stores
their images P_l = W̄ R_l. Each input then picks a fresh nonempty subset of
the pool plus a nonzero row vector r; the subset hides the input additively
and r drives the product check in :mod:`convoy.verify`.

Masks and keys never leave the client. Note that the pool is reused across
inputs, exactly as the scheme prescribes, which is a known weakness rather
than something this module tries to fix.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPES, ConvShape, OpCounter, add, as_matrix, matmul, sub
from .verify import TolerancePolicy
from .wire import decode_matrix, encode_matrix

_BUDGET = 2**63


@dataclass(frozen=True)
class SecurityParams:
    """``lambda1`` bounds mask magnitudes by 2**lambda1, ``lambda2`` is the mask pool size.

    ``input_bound`` declares the largest |x| the client will blind in exact
    mode; it feeds the int64 overflow budget checked by :meth:`check_budget`.
    """

    lambda1: int = 16
    lambda2: int = 4
    mode: str = "int"
    tolerance: TolerancePolicy | None = None
    input_bound: int = 2**10

    def __post_init__(self):
        if self.mode not in DTYPES:
            raise ValueError(f"mode must be 'int' or 'float', got {self.mode!r}")
        if self.lambda1 < 1 or self.lambda2 < 1:
            raise ValueError("lambda1 and lambda2 must be >= 1")
        if self.mode == "int" and self.lambda1 > 62:
            raise ValueError("lambda1 > 62 cannot be represented in int64 mode")
        if self.input_bound < 0:
            raise ValueError("input_bound must be non-negative")
        if self.tolerance is None:
            tol = TolerancePolicy.exact() if self.mode == "int" else TolerancePolicy.float_default()
            object.__setattr__(self, "tolerance", tol)
        elif self.mode == "int" and not self.tolerance.is_exact:
            raise ValueError("exact mode requires a zero tolerance policy")

    @property
    def dtype(self) -> np.dtype:
        return DTYPES[self.mode]

    @property
    def z_max(self) -> int:
        """Largest mask magnitude that can be drawn in exact mode."""
        return 2**self.lambda1 - 1

    @property
    def z_size(self) -> int:
        """|Z| for the integer sample set {-(2^l1 - 1)..-1} U {1..2^l1 - 1}."""
        return 2 * (2**self.lambda1 - 1)

    def blinded_bound(self) -> int:
        return int(self.input_bound) + self.lambda2 * self.z_max

    def check_budget(self, shape: ConvShape, weight_bound: int):
        """Raise ``ValueError`` if the worst-case verification sum could exceed int64.

        The widest intermediate is ``r @ (W̄ X̄')``, bounded by
        ``c_out * zmax * c_in*k^2 * max|W̄| * max|X̄'|``.
        """
        if self.mode != "int":
            return
        worst = shape.c_out * self.z_max * shape.patch * max(int(weight_bound), 1) * self.blinded_bound()
        if worst >= _BUDGET:
            raise ValueError(
                f"overflow budget exceeded: worst-case |r W̄ X̄'| = {worst:.3e} >= 2^63 "
                f"(lambda1={self.lambda1}, lambda2={self.lambda2}, input_bound={self.input_bound})"
            )


def sample_z(params: SecurityParams, rng: np.random.Generator, size=None):
    """Draw from Z = (-2^l1, 0) U (0, 2^l1), never zero.

    Exact mode is uniform over the nonzero integers in Z; float mode is
    uniform over (-2^l1, -1] U [1, 2^l1).
    """
    sign = np.where(rng.integers(0, 2, size=size) == 1, 1, -1)
    if params.mode == "int":
        mag = rng.integers(1, 2**params.lambda1, size=size, dtype=np.int64)
        out = sign * mag
    else:
        out = sign * rng.uniform(1.0, float(2**params.lambda1), size=size)
    if size is None:
        return out.item()
    return out.astype(params.dtype)


def model_hash(wbar) -> bytes:
    """SHA-256 over the wire encoding of the kernel matrix."""
    return hashlib.sha256(encode_matrix(wbar)).digest()


@dataclass(frozen=True)
class MaskSet:
    r_masks: tuple[np.ndarray, ...] = field(repr=False)
    p_masks: tuple[np.ndarray, ...] = field(repr=False)
    shape: ConvShape
    lambda1: int
    wbar_hash: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if len(self.r_masks) != len(self.p_masks) or not self.r_masks:
            raise ValueError("mask pool needs equal, nonzero numbers of R and P matrices")
        for r, p in zip(self.r_masks, self.p_masks):
            if r.shape != self.shape.im2col_dims or p.shape != self.shape.result_dims:
                raise ValueError("mask dimensions disagree with the convolution shape")
            if np.any(r == 0):
                raise ValueError("mask entries must be nonzero")
            r.flags.writeable = False
            p.flags.writeable = False

    @property
    def lambda2(self) -> int:
        return len(self.r_masks)

    @property
    def dtype(self) -> np.dtype:
        return self.r_masks[0].dtype

    def check(self, wbar) -> bool:
        """Recompute every P_l = W̄ R_l and compare."""
        wbar = as_matrix(wbar)
        return all(np.array_equal(matmul(wbar, r), p) for r, p in zip(self.r_masks, self.p_masks))

    def save(self, path):
        Path(path).write_bytes(dump_masks(self))

    @classmethod
    def load(cls, path) -> MaskSet:
        return load_masks(Path(path).read_bytes())


def precompute_masks(wbar, shape: ConvShape, params: SecurityParams, rng: np.random.Generator) -> MaskSet:
    """Draw the pool R_1..R_lambda2 and their images P_l = W̄ R_l."""
    wbar = as_matrix(wbar, params.dtype)
    if wbar.shape != shape.kernel_dims:
        raise ValueError(f"kernel matrix is {wbar.shape}, shape expects {shape.kernel_dims}")
    params.check_budget(shape, int(np.max(np.abs(wbar))) if params.mode == "int" else 1)
    r_masks, p_masks = [], []
    for _ in range(params.lambda2):
        r = sample_z(params, rng, size=shape.im2col_dims)
        r_masks.append(r)
        p_masks.append(matmul(wbar, r))
    return MaskSet(tuple(r_masks), tuple(p_masks), shape, params.lambda1, model_hash(wbar))


@dataclass(frozen=True)
class SecretKey:
    """Per-input key: 0-based indices of the chosen masks and the check vector ``r``."""

    index_set: tuple[int, ...]
    r: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.index_set:
            raise ValueError("index set must be nonempty")
        if len(set(self.index_set)) != len(self.index_set):
            raise ValueError("index set has duplicates")
        if np.any(np.asarray(self.r) == 0):
            raise ValueError("check vector r has a zero entry")


def keygen(params: SecurityParams, shape: ConvShape, rng: np.random.Generator) -> SecretKey:
    """Uniform nonempty subset of the pool (coin per mask, redraw on empty) and r drawn from Z."""
    while True:
        picks = rng.integers(0, 2, size=params.lambda2)
        if picks.any():
            break
    index_set = tuple(int(i) for i in np.flatnonzero(picks))
    r = sample_z(params, rng, size=shape.c_out)
    return SecretKey(index_set, r)


def _check_indices(sk: SecretKey, masks: MaskSet):
    if max(sk.index_set) >= masks.lambda2 or min(sk.index_set) < 0:
        raise ValueError(f"key references masks outside the pool of {masks.lambda2}")


def blind(xbar, sk: SecretKey, masks: MaskSet, counter: OpCounter | None = None) -> np.ndarray:
    """X̄' = X̄ + sum of the selected R_l, added one mask at a time."""
    xbar = as_matrix(xbar, masks.dtype)
    if xbar.shape != masks.shape.im2col_dims:
        raise ValueError(f"input matrix is {xbar.shape}, masks expect {masks.shape.im2col_dims}")
    _check_indices(sk, masks)
    out = xbar.copy()
    for l in sk.index_set:
        add(out, masks.r_masks[l], counter, inplace=True)
    return out


def recover(ybar_prime, sk: SecretKey, masks: MaskSet, counter: OpCounter | None = None) -> np.ndarray:
    """Ȳ = Ȳ' - sum of the selected P_l."""
    ybar_prime = as_matrix(ybar_prime, masks.dtype)
    if ybar_prime.shape != masks.shape.result_dims:
        raise ValueError(f"result matrix is {ybar_prime.shape}, masks expect {masks.shape.result_dims}")
    _check_indices(sk, masks)
    out = ybar_prime.copy()
    for l in sk.index_set:
        sub(out, masks.p_masks[l], counter, inplace=True)
    return out


# On-disk mask cache: "CVYM" | version u8 | lambda1 u32 | lambda2 u32 |
# m, n, k, c_in, c_out u32 | sha256(W̄) 32 bytes | R_1..R_L | P_1..P_L
CACHE_MAGIC = b"CVYM"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sBII5I32s")


def dump_masks(masks: MaskSet) -> bytes:
    s = masks.shape
    wbar_hash = masks.wbar_hash.ljust(32, b"\0")
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, masks.lambda1, masks.lambda2,
                                s.m, s.n, s.k, s.c_in, s.c_out, wbar_hash)]
    parts += [encode_matrix(r) for r in masks.r_masks]
    parts += [encode_matrix(p) for p in masks.p_masks]
    return b"".join(parts)


def load_masks(buf: bytes) -> MaskSet:
    if len(buf) < _CACHE_HEADER.size:
        raise ValueError("mask cache truncated")
    magic, version, lambda1, lambda2, m, n, k, c_in, c_out, wbar_hash = _CACHE_HEADER.unpack_from(buf)
    if magic != CACHE_MAGIC:
        raise ValueError(f"not a mask cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported mask cache version {version}")
    offset = _CACHE_HEADER.size
    mats = []
    for _ in range(2 * lambda2):
        a, offset = decode_matrix(buf, offset)
        mats.append(a)
    if offset != len(buf):
        raise ValueError("trailing bytes in mask cache")
    shape = ConvShape(m=m, n=n, k=k, c_in=c_in, c_out=c_out)
    return MaskSet(tuple(mats[:lambda2]), tuple(mats[lambda2:]), shape, lambda1, wbar_hash)

