"""Pure-numpy reduction kernels with the same accumulation order as the compiled core.

numpy reduces along a leading, non-contiguous axis by adding one slice at a
time, which is exactly the sequential ascending order the compiled kernels
use.  When the trailing extent collapses to a single element numpy switches
to pairwise summation, so a zero column is appended in that case.
"""

import numpy as np

# elements per temporary product block
_BLOCK = 1 << 22


def _sequential_sum(prod):
    # prod: (K, ...) with at least two trailing elements
    return np.add.reduce(prod, axis=0)


def matmul_tn(a, b):
    """Return ``a.T @ b`` for ``a`` of shape (K, M) and ``b`` of shape (K, N)."""
    K, M = a.shape
    if b.shape[0] != K:
        raise ValueError(f"inner dimensions differ: {K} vs {b.shape[0]}")
    N = b.shape[1]
    out = np.zeros((M, N), dtype=a.dtype)
    if K == 0 or M == 0 or N == 0:
        return out
    padded = N == 1
    if padded:
        b = np.concatenate([b, np.zeros_like(b)], axis=1)
    width = b.shape[1]
    rows = max(1, _BLOCK // (K * width))
    for start in range(0, M, rows):
        stop = min(M, start + rows)
        prod = a[:, start:stop, None] * b[:, None, :]
        block = _sequential_sum(prod)
        out[start:stop] = block[:, :N]
    return out


def matmul_nn(a, b):
    """Return ``a @ b`` for ``a`` of shape (M, K) and ``b`` of shape (K, N)."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    return matmul_tn(np.ascontiguousarray(a.T), b)


def column_sums(a):
    """Sum the rows of ``a`` (shape (K, N)) into a length-N vector."""
    K, N = a.shape
    if K == 0 or N == 0:
        return np.zeros(N, dtype=a.dtype)
    if N == 1:
        a = np.concatenate([a, np.zeros_like(a)], axis=1)
    return _sequential_sum(a)[:N].copy()
