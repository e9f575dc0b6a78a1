"""Kernel backend selection and layout helpers.

The compiled core (``neq._ckernels``) is used when it imports; otherwise the
numpy fallback takes over.  Set ``NEQ_KERNELS=python`` to force the fallback.
Both backends produce bit-identical results.
"""

import os

import numpy as np

from neq import _pykernels

_forced = os.environ.get("NEQ_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from neq import _ckernels as _impl
        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _pykernels
        BACKEND = "python"


def backend_module(name=None):
    """Return the kernel module for ``name`` ('compiled' or 'python'), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "compiled":
        from neq import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def matmul_tn(a, b):
    return _impl.matmul_tn(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul_nn(a, b):
    return _impl.matmul_nn(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul_nt(a, b):
    """``a @ b.T`` through the nn kernel."""
    return _impl.matmul_nn(np.ascontiguousarray(a), np.ascontiguousarray(b.T))


def column_sums(a):
    return _impl.column_sums(np.ascontiguousarray(a))


def im2col(x, kh, kw, stride, padding):
    """Unfold NCHW ``x`` into rows of shape (B*Ho*Wo, C*kh*kw)."""
    B, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, Ho, Wo, C, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(B * Ho * Wo, C * kh * kw), Ho, Wo


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Fold rows produced by :func:`im2col` back, summing overlaps in fixed order."""
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += patch
    if padding:
        out = out[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(out)
