"""Bandlimited spectral fields on a truncated, centered frequency lattice.

Coefficients are stored on the full (not half) lattice in centered layout:
array index ``k + h`` holds integer frequency ``k`` for ``k in [-h, h]`` with
``h = (n - 1) // 2``. Vector fields carry their component axis just before
the ``d`` lattice axes, so a velocity has shape ``(..., d, *dims)``; any
leading axes are batch axes.

Transform convention: a coefficient array ``c`` represents the real field

    f(x) = sum_xi c(xi) exp(2 pi i xi . x / N)

on a grid of size ``N``; the forward transform carries the ``1/N``. Under
this convention the product of two spatial fields is the (untruncated)
convolution of their coefficient arrays, and a unit impulse at zero
frequency is the constant field 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

__all__ = [
    "FrequencyLattice",
    "OperatorCoeffs",
    "SymmetryError",
    "LatticeMismatchError",
    "laplacian_symbol",
    "build_operator",
    "hermitian_part",
    "is_hermitian",
    "random_hermitian",
    "truncated_convolve",
    "correlate_auto",
    "spectral_to_spatial",
    "spatial_to_spectral",
    "PaddedTransform",
]

# scipy.fft worker count; set from the CLI
FFT_WORKERS = 1


class SymmetryError(ValueError):
    """Coefficients are not conjugate-symmetric (the field is not real)."""


class LatticeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyLattice:
    dims: tuple[int, ...]
    full_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        full = tuple(int(n) for n in self.full_dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "full_dims", full)
        if len(dims) not in (2, 3) or len(full) != len(dims):
            raise ValueError(f"lattice must be 2-D or 3-D with matching grid, got {dims} / {full}")
        for n, big in zip(dims, full):
            if n < 1 or n % 2 == 0:
                raise ValueError(f"lattice sizes must be odd and positive, got {dims}")
            if n > big:
                raise ValueError(f"lattice {dims} exceeds grid {full}")

    @classmethod
    def from_bandlimit(cls, bandlimit, full_dims):
        """Lattice with ``bandlimit`` frequencies per axis, rounded down to odd."""
        full = tuple(int(n) for n in full_dims)
        if np.isscalar(bandlimit):
            bandlimit = (int(bandlimit),) * len(full)
        dims = []
        for b, big in zip(bandlimit, full):
            b = min(int(b), big)
            if b % 2 == 0:
                b -= 1
            dims.append(max(b, 1))
        return cls(tuple(dims), full)

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def half(self) -> tuple[int, ...]:
        return tuple((n - 1) // 2 for n in self.dims)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.dims))

    @cached_property
    def frequencies(self) -> list[np.ndarray]:
        """Integer frequencies per axis, each broadcastable to the lattice shape."""
        out = []
        for axis, (n, h) in enumerate(zip(self.dims, self.half)):
            shape = [1] * self.d
            shape[axis] = n
            out.append(np.arange(-h, h + 1).reshape(shape))
        return out

    @cached_property
    def padded_dims(self) -> tuple[int, ...]:
        # >= 2n-1 makes the cropped circular convolution exact
        return tuple(sfft.next_fast_len(2 * n - 1, real=True) for n in self.dims)

    def check(self, arr, what="field"):
        if tuple(arr.shape[-self.d:]) != self.dims:
            raise LatticeMismatchError(
                f"{what} has lattice shape {arr.shape[-self.d:]}, expected {self.dims}"
            )


def laplacian_symbol(lattice: FrequencyLattice) -> np.ndarray:
    """Symbol of the discrete negative Laplacian, ``sum_i 2 - 2 cos(2 pi xi_i / N_i)``."""
    A = np.zeros(lattice.dims)
    for xi, big in zip(lattice.frequencies, lattice.full_dims):
        A = A - 2.0 * (np.cos(2.0 * np.pi * xi / big) - 1.0)
    return A


@dataclass(frozen=True, eq=False)
class OperatorCoeffs:
    """Fourier coefficients of ``L = (-alpha Lap + Id)^3`` and ``K = L^-1``.

    ``alpha`` may be an array of per-item weights; ``L`` and ``K`` then have
    shape ``alpha.shape + (1, *dims)`` so they broadcast over vector fields.
    """

    lattice: FrequencyLattice
    A: np.ndarray
    alpha: float | np.ndarray
    L: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)

    @property
    def logdet(self):
        """``ln|L| = 3 sum_xi ln(alpha A + 1)``."""
        a = np.asarray(self.alpha, dtype=float)
        out = 3.0 * np.sum(np.log1p(a[..., None] * self.A.ravel()), axis=-1)
        return float(out) if out.ndim == 0 else out


def build_operator(lattice: FrequencyLattice, alpha) -> OperatorCoeffs:
    a = np.asarray(alpha, dtype=float)
    if not (np.all(a > 0) and np.all(np.isfinite(a))):
        raise ValueError(f"alpha must be positive and finite, got {alpha}")
    A = laplacian_symbol(lattice)
    if a.ndim == 0:
        L = (float(a) * A + 1.0) ** 3
        return OperatorCoeffs(lattice, A, float(a), L, 1.0 / L)
    L = (a.reshape(a.shape + (1,) * (lattice.d + 1)) * A + 1.0) ** 3
    return OperatorCoeffs(lattice, A, a, L, 1.0 / L)


def _reverse(c, d):
    """c(-xi) on a centered lattice."""
    return np.flip(c, axis=tuple(range(-d, 0)))


def hermitian_part(c, d=None):
    """Project onto conjugate-symmetric coefficients, ``(c(xi) + conj c(-xi)) / 2``."""
    d = c.ndim if d is None else d
    return 0.5 * (c + np.conj(_reverse(c, d)))


def is_hermitian(c, d=None, rtol=1e-10):
    d = c.ndim if d is None else d
    scale = max(float(np.max(np.abs(c), initial=0.0)), 1e-300)
    return float(np.max(np.abs(c - np.conj(_reverse(c, d))), initial=0.0)) <= rtol * scale


def random_hermitian(lattice, rng, n_components=None, scale=1.0, batch=()):
    """Random conjugate-symmetric coefficients (i.e. a random real bandlimited field)."""
    comps = () if n_components is None else (n_components,)
    shape = tuple(batch) + comps + lattice.dims
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return scale * hermitian_part(c, lattice.d)


def _embed(c, d, target):
    """Zero-pad centered coefficients into an FFT-ordered array of size ``target``."""
    out = np.zeros(c.shape[:-d] + tuple(target), dtype=complex)
    src, dst = [], []
    for n, P in zip(c.shape[-d:], target):
        h = (n - 1) // 2
        src.append((slice(h, n), slice(0, h)))
        dst.append((slice(0, h + 1), slice(P - h, P)))
    lead = (Ellipsis,)
    for choice in np.ndindex(*(2,) * d):
        s = lead + tuple(src[a][k] for a, k in enumerate(choice))
        t = lead + tuple(dst[a][k] for a, k in enumerate(choice))
        out[t] = c[s]
    return out


def _extract(C, d, dims):
    """Inverse of :func:`_embed`: read the centered lattice out of an FFT-ordered array."""
    out = np.empty(C.shape[:-d] + tuple(dims), dtype=complex)
    src, dst = [], []
    for n, P in zip(dims, C.shape[-d:]):
        h = (n - 1) // 2
        dst.append((slice(h, n), slice(0, h)))
        src.append((slice(0, h + 1), slice(P - h, P)))
    for choice in np.ndindex(*(2,) * d):
        s = (Ellipsis,) + tuple(src[a][k] for a, k in enumerate(choice))
        t = (Ellipsis,) + tuple(dst[a][k] for a, k in enumerate(choice))
        out[t] = C[s]
    return out


class PaddedTransform:
    """Real transforms between lattice coefficients and a spatial grid.

    ``grid`` defaults to the lattice's zero-padded convolution grid; pass the
    image grid to get full-resolution spatial fields. The real-to-complex
    transforms store only half of the last axis; negative last-axis
    frequencies are recovered by conjugate symmetry.
    """

    def __init__(self, lattice: FrequencyLattice, grid=None):
        self.lattice = lattice
        self.d = lattice.d
        self.grid = tuple(lattice.padded_dims if grid is None else grid)
        self.axes = tuple(range(-self.d, 0))
        n_last = lattice.dims[-1]
        self._h_last = (n_last - 1) // 2
        half_grid = self.grid[:-1] + (self.grid[-1] // 2 + 1,)
        self._half_grid = half_grid

    def to_spatial(self, c):
        """Coefficients ``(..., *dims)`` to real samples ``(..., *grid)``."""
        d, h = self.d, self._h_last
        # keep only non-negative last-axis frequencies, embed the rest
        c_half = c[..., h:]
        out = np.zeros(c.shape[:-d] + self._half_grid, dtype=complex)
        src, dst = [], []
        for n, P in zip(self.lattice.dims[:-1], self.grid[:-1]):
            hh = (n - 1) // 2
            src.append((slice(hh, n), slice(0, hh)))
            dst.append((slice(0, hh + 1), slice(P - hh, P)))
        for choice in np.ndindex(*(2,) * (d - 1)):
            s = (Ellipsis,) + tuple(src[a][k] for a, k in enumerate(choice)) + (slice(None),)
            t = (Ellipsis,) + tuple(dst[a][k] for a, k in enumerate(choice)) + (slice(0, h + 1),)
            out[t] = c_half[s]
        return sfft.irfftn(out, s=self.grid, axes=self.axes, norm="forward", workers=FFT_WORKERS)

    def _crop_half(self, F):
        """Half-spectrum (FFT order) to full centered lattice coefficients."""
        d, h = self.d, self._h_last
        dims = self.lattice.dims
        half = F[..., : h + 1]
        pos = np.empty(F.shape[:-d] + dims[:-1] + (h + 1,), dtype=complex)
        src, dst = [], []
        for n, P in zip(dims[:-1], self.grid[:-1]):
            hh = (n - 1) // 2
            dst.append((slice(hh, n), slice(0, hh)))
            src.append((slice(0, hh + 1), slice(P - hh, P)))
        for choice in np.ndindex(*(2,) * (d - 1)):
            s = (Ellipsis,) + tuple(src[a][k] for a, k in enumerate(choice)) + (slice(None),)
            t = (Ellipsis,) + tuple(dst[a][k] for a, k in enumerate(choice)) + (slice(None),)
            pos[t] = half[s]
        # c(xi', -k) = conj c(-xi', k)
        neg = np.conj(np.flip(pos[..., 1:], axis=self.axes))
        return np.concatenate([neg, pos], axis=-1)

    def to_spectral(self, f):
        """Real samples ``(..., *grid)`` to lattice coefficients (1/N normalized)."""
        F = sfft.rfftn(f, axes=self.axes, norm="forward", workers=FFT_WORKERS)
        return self._crop_half(F)

    def adjoint_to_spatial(self, s):
        """Adjoint of :meth:`to_spatial` w.r.t. ``Re sum conj(a) b`` on the lattice."""
        F = sfft.rfftn(s, axes=self.axes, norm="backward", workers=FFT_WORKERS)
        return self._crop_half(F)


_transform_cache: dict = {}


def padded_transform(lattice, grid=None) -> PaddedTransform:
    key = (lattice, None if grid is None else tuple(grid))
    tr = _transform_cache.get(key)
    if tr is None:
        tr = _transform_cache[key] = PaddedTransform(lattice, grid)
    return tr


def _lattice_of(a, lattice, d):
    if lattice is not None:
        return lattice
    dims = a.shape[-d:]
    return FrequencyLattice(dims, dims)


def truncated_convolve(a, b, lattice: FrequencyLattice | None = None, d: int | None = None):
    """Circular convolution of two coefficient arrays, cropped back to the lattice.

    Both inputs are zero-padded to at least ``2n-1`` points per axis, so the
    retained frequencies are exact. Inputs must be conjugate-symmetric when
    the fast real path is used; general complex inputs go through a complex
    transform.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if d is None:
        d = lattice.d if lattice is not None else a.ndim
    if a.shape[-d:] != b.shape[-d:]:
        raise LatticeMismatchError(f"lattice shapes differ: {a.shape[-d:]} vs {b.shape[-d:]}")
    if lattice is not None:
        lattice.check(a)
    dims = a.shape[-d:]
    P = tuple(sfft.next_fast_len(2 * n - 1) for n in dims)
    axes = tuple(range(-d, 0))
    A = sfft.ifftn(_embed(a, d, P), axes=axes, norm="forward", workers=FFT_WORKERS)
    B = sfft.ifftn(_embed(b, d, P), axes=axes, norm="forward", workers=FFT_WORKERS)
    C = sfft.fftn(A * B, axes=axes, norm="forward", workers=FFT_WORKERS)
    return _extract(C, d, dims)


def correlate_auto(M, v, lattice: FrequencyLattice):
    """Matrix-vector field correlation ``out_i = sum_j M_ij star v_j``, truncated.

    ``(a star b)(xi) = sum_eta conj(a(eta)) b(eta + xi)``, i.e. a convolution
    with ``a`` conjugate-reflected. ``M`` has shape ``(..., d, d, *dims)``.
    """
    d = lattice.d
    lattice.check(M, "matrix field")
    lattice.check(v, "vector field")
    Mr = np.conj(_reverse(M, d))
    prods = truncated_convolve(Mr, np.expand_dims(v, -d - 2), d=d)
    return prods.sum(axis=-d - 1)


def spectral_to_spatial(c, lattice: FrequencyLattice, check=True):
    """Zero-pad to the image grid and inverse-transform; returns real samples."""
    lattice.check(c)
    if check and not is_hermitian(c, lattice.d, rtol=1e-8):
        raise SymmetryError("coefficients are not conjugate-symmetric")
    return padded_transform(lattice, lattice.full_dims).to_spatial(c)


def spatial_to_spectral(f, lattice: FrequencyLattice):
    """Forward transform of real samples on the image grid, cropped to the lattice."""
    f = np.asarray(f, dtype=float)
    if tuple(f.shape[-lattice.d:]) != lattice.full_dims:
        raise LatticeMismatchError(f"grid {f.shape[-lattice.d:]} != {lattice.full_dims}")
    return padded_transform(lattice, lattice.full_dims).to_spectral(f)
