"""Dense matrix arithmetic and the im2col lowering of 2-D convolution.

Conventions used throughout the package:

* a *matrix* is a 2-D ``numpy.ndarray`` of dtype ``int64`` (exact mode) or
  ``float64`` (float mode);
* an input tensor is ``(c_in, m, n)``, a kernel set ``(c_out, c_in, k, k)``
  and an output tensor ``(c_out, m - k + 1, n - k + 1)``;
* convolution is valid (no padding) with stride 1.

Integer arithmetic never wraps: every product and sum is bounded before it
runs and falls back to exact Python integers when the bound is too loose,
raising ``OverflowError`` if the true result does not fit in int64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

INT = np.dtype(np.int64)
FLOAT = np.dtype(np.float64)
DTYPES = {"int": INT, "float": FLOAT}

INT64_MAX = 2**63 - 1
INT64_MIN = -(2**63)
# float64 bounds are approximate; keep a factor-of-two margin under 2**63
_SAFE_BOUND = float(2**62)


@dataclass(frozen=True)
class ConvShape:
    m: int
    n: int
    k: int
    c_in: int
    c_out: int

    def __post_init__(self):
        for name in ("m", "n", "k", "c_in", "c_out"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.k > min(self.m, self.n):
            raise ValueError(f"kernel size {self.k} exceeds input {self.m}x{self.n}")

    @property
    def out_rows(self) -> int:
        return self.m - self.k + 1

    @property
    def out_cols(self) -> int:
        return self.n - self.k + 1

    @property
    def windows(self) -> int:
        """Number of sliding windows, i.e. columns of the im2col matrix."""
        return self.out_rows * self.out_cols

    @property
    def patch(self) -> int:
        """Length of one flattened multichannel window, c_in * k**2."""
        return self.c_in * self.k * self.k

    @property
    def im2col_dims(self) -> tuple[int, int]:
        return (self.patch, self.windows)

    @property
    def kernel_dims(self) -> tuple[int, int]:
        return (self.c_out, self.patch)

    @property
    def result_dims(self) -> tuple[int, int]:
        return (self.c_out, self.windows)

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (self.c_in, self.m, self.n)

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def output_dims(self) -> tuple[int, int, int]:
        return (self.c_out, self.out_rows, self.out_cols)

    @classmethod
    def of(cls, x: np.ndarray, w: np.ndarray) -> ConvShape:
        """Shape of convolving input ``x`` with kernel set ``w``."""
        x = np.asarray(x)
        w = np.asarray(w)
        if x.ndim != 3 or w.ndim != 4:
            raise ValueError(f"expected (c_in, m, n) input and (c_out, c_in, k, k) kernels, got {x.shape} and {w.shape}")
        c_out, c_in, k, k2 = w.shape
        if k != k2:
            raise ValueError(f"kernels must be square, got {k}x{k2}")
        if x.shape[0] != c_in:
            raise ValueError(f"input has {x.shape[0]} channels, kernels expect {c_in}")
        return cls(m=x.shape[1], n=x.shape[2], k=k, c_in=c_in, c_out=c_out)

    def as_dict(self) -> dict[str, int]:
        return {"m": self.m, "n": self.n, "k": self.k, "c_in": self.c_in, "c_out": self.c_out}


@dataclass
class OpCounter:
    """Scalar operation tally.

    ``sm`` counts scalar multiplications, ``sa`` counts elementwise matrix
    additions and subtractions. Additions that accumulate a dot product are
    kept apart in ``acc`` because the cost model ignores them.
    """

    sm: int = 0
    sa: int = 0
    acc: int = 0

    def __iadd__(self, other: OpCounter) -> OpCounter:
        self.sm += other.sm
        self.sa += other.sa
        self.acc += other.acc
        return self


def as_matrix(a, dtype=None) -> np.ndarray:
    """Coerce to a C-contiguous 2-D matrix of a supported dtype."""
    a = np.asarray(a)
    if dtype is not None:
        dtype = np.dtype(dtype)
        if a.dtype != dtype:
            if dtype == INT and a.dtype.kind == "f":
                raise TypeError("refusing to truncate floats into an integer matrix")
            a = a.astype(dtype)
    elif a.dtype.kind in "iub" and a.dtype != INT:
        a = a.astype(INT)
    elif a.dtype.kind == "f" and a.dtype != FLOAT:
        a = a.astype(FLOAT)
    if a.dtype not in (INT, FLOAT):
        raise TypeError(f"unsupported dtype {a.dtype}")
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_same_dtype(a: np.ndarray, b: np.ndarray):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed arithmetic modes: {a.dtype} and {b.dtype}")


def _max_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a.astype(FLOAT)))) if a.size else 0.0


def _to_int64(exact: np.ndarray) -> np.ndarray:
    lo, hi = exact.min(), exact.max()
    if lo < INT64_MIN or hi > INT64_MAX:
        raise OverflowError("integer result does not fit in int64")
    return exact.astype(INT)


def matmul(a, b, counter: OpCounter | None = None) -> np.ndarray:
    """Product ``a @ b`` with a fixed left-to-right summation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    _check_same_dtype(a, b)
    rows, inner = a.shape
    if b.shape[0] != inner:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    cols = b.shape[1]
    if a.dtype == INT:
        row_bound = float(np.max(np.sum(np.abs(a.astype(FLOAT)), axis=1)))
        if row_bound * _max_abs(b) >= _SAFE_BOUND:
            out = _to_int64(np.dot(a.astype(object), b.astype(object)))
        else:
            out = _kernels.matmul_ikj(a, b, np.empty((rows, cols), dtype=INT))
    else:
        out = _kernels.matmul_ikj(a, b, np.empty((rows, cols), dtype=FLOAT))
    if counter is not None:
        counter.sm += rows * inner * cols
        counter.acc += rows * (inner - 1) * cols
    return out


def _elementwise(a, b, sign: int, counter: OpCounter | None, inplace: bool) -> np.ndarray:
    if inplace and not (isinstance(a, np.ndarray) and as_matrix(a) is a):
        raise TypeError("in-place arithmetic needs a contiguous int64/float64 matrix")
    a = as_matrix(a)
    b = as_matrix(b)
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype == INT and _max_abs(a) + _max_abs(b) >= _SAFE_BOUND:
        ea, eb = a.astype(object), b.astype(object)
        exact = _to_int64(ea + eb if sign > 0 else ea - eb)
        if inplace:
            a[...] = exact
            exact = a
        out = exact
    else:
        op = np.add if sign > 0 else np.subtract
        out = op(a, b, out=a if inplace else None)
    if counter is not None:
        counter.sa += a.size
    return out


def add(a, b, counter: OpCounter | None = None, inplace: bool = False) -> np.ndarray:
    """Elementwise sum; with ``inplace`` the result overwrites ``a`` (which must be a matrix already)."""
    return _elementwise(a, b, 1, counter, inplace)


def sub(a, b, counter: OpCounter | None = None, inplace: bool = False) -> np.ndarray:
    return _elementwise(a, b, -1, counter, inplace)


def _check_input(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"input tensor must be (c_in, m, n), got shape {x.shape}")
    if x.dtype.kind in "iub":
        x = x.astype(INT)
    if x.dtype not in (INT, FLOAT):
        raise TypeError(f"unsupported dtype {x.dtype}")
    return x


def _check_kernels(w) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 4 or min(w.shape) < 1 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel set must be (c_out, c_in, k, k), got shape {w.shape}")
    if w.dtype.kind in "iub":
        w = w.astype(INT)
    if w.dtype not in (INT, FLOAT):
        raise TypeError(f"unsupported dtype {w.dtype}")
    return w


def im2col(x, k: int) -> np.ndarray:
    """Lower a ``(c_in, m, n)`` input to its ``(c_in*k*k, (m-k+1)*(n-k+1))`` im2col matrix.

    Column ``p * (n-k+1) + q`` holds the window whose top-left corner is
    ``(p, q)``; within a column the channels are stacked in order and each
    k x k window is flattened row-major.
    """
    x = _check_input(x)
    c_in, m, n = x.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"kernel size {k} invalid for {m}x{n} input")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (c_in, oh, ow, k, k) -> (c_in, k, k, oh, ow)
    cols = windows.transpose(0, 3, 4, 1, 2)
    return np.ascontiguousarray(cols.reshape(c_in * k * k, (m - k + 1) * (n - k + 1)))


def flatten_kernels(w) -> np.ndarray:
    """Kernel matrix of shape ``(c_out, c_in*k*k)``: row i concatenates W_i^(1..c_in), each row-major."""
    w = _check_kernels(w)
    c_out = w.shape[0]
    return np.ascontiguousarray(w.reshape(c_out, -1))


def reshape_output(ybar, shape: ConvShape) -> np.ndarray:
    """Split each row of a ``(c_out, oh*ow)`` product into an ``oh x ow`` output channel."""
    ybar = as_matrix(ybar)
    if ybar.shape != shape.result_dims:
        raise ValueError(f"expected {shape.result_dims} product, got {ybar.shape}")
    return ybar.reshape(shape.output_dims).copy()


def flatten_output(y) -> np.ndarray:
    """Inverse of :func:`reshape_output`."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"output tensor must be (c_out, rows, cols), got shape {y.shape}")
    return as_matrix(y.reshape(y.shape[0], -1))


def conv_via_gemm(x, w, counter: OpCounter | None = None) -> np.ndarray:
    """Plaintext convolution through the lowering: reshape(W̄ @ im2col(x))."""
    shape = ConvShape.of(x, w)
    return reshape_output(matmul(flatten_kernels(w), im2col(x, shape.k), counter), shape)


def direct_conv(x, w) -> np.ndarray:
    """Reference valid convolution by six nested Python loops.

    Integer inputs are accumulated as unbounded Python ints, so this is an
    exact oracle; it shares nothing with the im2col path.
    """
    x = _check_input(x)
    w = _check_kernels(w)
    shape = ConvShape.of(x, w)
    xs = x.tolist()
    ws = w.tolist()
    k = shape.k
    out = []
    for o in range(shape.c_out):
        channel = []
        for p in range(shape.out_rows):
            row = []
            for q in range(shape.out_cols):
                total = 0
                for c in range(shape.c_in):
                    xc, wc = xs[c], ws[o][c]
                    for i in range(k):
                        xr, wr = xc[p + i], wc[i]
                        for j in range(k):
                            total += xr[q + j] * wr[j]
                row.append(total)
            channel.append(row)
        out.append(channel)
    if x.dtype == INT and w.dtype == INT:
        return _to_int64(np.array(out, dtype=object)).reshape(shape.output_dims)
    return np.array(out, dtype=FLOAT).reshape(shape.output_dims)


def direct_conv_fast(x, w) -> np.ndarray:
    """Compiled direct convolution, the client's plaintext baseline in benchmarks."""
    x = np.ascontiguousarray(_check_input(x))
    w = np.ascontiguousarray(_check_kernels(w))
    _check_same_dtype(x, w)
    shape = ConvShape.of(x, w)
    if x.dtype == INT:
        bound = _max_abs(x) * float(np.max(np.sum(np.abs(w.astype(FLOAT)), axis=(1, 2, 3))))
        if bound >= _SAFE_BOUND:
            raise OverflowError("direct convolution may overflow int64")
    return _kernels.direct_conv_loop(x, w, np.zeros(shape.output_dims, dtype=x.dtype))
