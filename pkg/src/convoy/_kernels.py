"""Compiled inner loops.

Every kernel accumulates in a fixed order (left to right over the reduction
index) and numba does not reassociate float sums without ``fastmath``, so the
results are bit-reproducible across runs.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def matmul_ikj(a, b, out):
    rows, inner = a.shape
    cols = b.shape[1]
    for i in range(rows):
        for j in range(cols):
            out[i, j] = 0
        for t in range(inner):
            ait = a[i, t]
            for j in range(cols):
                out[i, j] += ait * b[t, j]
    return out


@numba.njit(cache=True)
def direct_conv_loop(x, w, out):
    c_out, c_in, k, _ = w.shape
    oh = out.shape[1]
    ow = out.shape[2]
    for o in range(c_out):
        for p in range(oh):
            for q in range(ow):
                acc = out[o, p, q]
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += x[c, p + i, q + j] * w[o, c, i, j]
                out[o, p, q] = acc
    return out


def warmup():
    """Compile every kernel for both dtypes so timings exclude JIT cost."""
    for dtype in (np.int64, np.float64):
        a = np.ones((2, 2), dtype=dtype)
        matmul_ikj(a, a, np.empty((2, 2), dtype=dtype))
        x = np.ones((1, 2, 2), dtype=dtype)
        direct_conv_loop(x, np.ones((1, 1, 1, 1), dtype=dtype), np.zeros((1, 2, 2), dtype=dtype))
