"""Interpolation kernels, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``HBATLAS_PURE_PYTHON=1``
to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("HBATLAS_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def backends():
    """Available implementations, keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def sample(img, pos, d, wrap=False, grad=False, impl=None):
    """Multilinear sampling of ``img (..., *N)`` at positions ``pos (..., d, *Q)``.

    Positions are in voxel index units. Out-of-range positions are clamped
    (``wrap=False``) or wrapped periodically. With ``grad=True`` also returns
    the derivative of the sampled value w.r.t. each position coordinate,
    shape ``(..., d, *Q)``; clamped coordinates have zero derivative.
    """
    impl = _impl if impl is None else impl
    img = np.asarray(img, dtype=float)
    pos = np.asarray(pos, dtype=float)
    dims = img.shape[img.ndim - d:]
    q_shape = pos.shape[pos.ndim - d:]
    if pos.shape[pos.ndim - d - 1] != d:
        raise ValueError(f"positions {pos.shape} lack a {d}-component axis")
    batch = np.broadcast_shapes(img.shape[: img.ndim - d], pos.shape[: pos.ndim - d - 1])
    img_b = np.broadcast_to(img, batch + dims).reshape((-1,) + dims)
    pos_b = np.broadcast_to(pos, batch + (d,) + q_shape).reshape((-1, d, int(np.prod(q_shape))))
    res = impl.interp(img_b, pos_b, wrap=wrap, grad=grad)
    if grad:
        vals, grads = res
        return vals.reshape(batch + q_shape), grads.reshape(batch + (d,) + q_shape)
    return res.reshape(batch + q_shape)
