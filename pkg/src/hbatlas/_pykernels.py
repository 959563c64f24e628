"""Pure numpy multilinear interpolation (fallback for the compiled kernels)."""

import numpy as np


def _axis_weights(p, n, wrap):
    if wrap:
        fl = np.floor(p)
        t = p - fl
        i0 = fl.astype(np.intp) % n
        i1 = (i0 + 1) % n
        inside = np.ones(p.shape, dtype=bool)
    else:
        inside = (p >= 0.0) & (p <= n - 1)
        q = np.clip(p, 0.0, n - 1)
        i0 = np.minimum(np.floor(q).astype(np.intp), max(n - 2, 0))
        t = q - i0
        i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, t, inside


def interp(img, pos, wrap=False, grad=False):
    """Sample ``img (B, *N)`` at ``pos (B, d, K)``; optionally the positional gradient."""
    img = np.ascontiguousarray(img, dtype=float)
    pos = np.asarray(pos, dtype=float)
    B = img.shape[0]
    dims = img.shape[1:]
    d = len(dims)
    K = pos.shape[-1]
    flat = img.reshape(B, -1)
    strides = np.cumprod((1,) + dims[::-1])[:-1][::-1]
    parts = [_axis_weights(pos[:, a], dims[a], wrap) for a in range(d)]
    vals = np.zeros((B, K))
    grads = np.zeros((B, d, K)) if grad else None
    bidx = np.arange(B)[:, None]
    for corner in np.ndindex(*(2,) * d):
        idx = 0
        w = 1.0
        for a, c in enumerate(corner):
            i0, i1, t, _ = parts[a]
            idx = idx + (i1 if c else i0) * strides[a]
            w = w * (t if c else 1.0 - t)
        v = flat[bidx, idx]
        vals += w * v
        if grad:
            for g in range(d):
                wg = 1.0
                for a, c in enumerate(corner):
                    t = parts[a][2]
                    if a == g:
                        wg = wg * (1.0 if c else -1.0)
                    else:
                        wg = wg * (t if c else 1.0 - t)
                grads[:, g] += wg * v
    if grad:
        for g in range(d):
            grads[:, g] *= parts[g][3]
        return vals, grads
    return vals
