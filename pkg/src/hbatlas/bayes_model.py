"""Log-densities of the hierarchical model (up to parameter-free constants)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fourier_field import OperatorCoeffs, build_operator
from .geodesic import DeformationField, Image, warp_image


@dataclass(frozen=True)
class NoiseModel:
    sigma2: float
    M: int

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"noise variance must be positive, got {self.sigma2}")
        if self.M < 1:
            raise ValueError(f"voxel count must be >= 1, got {self.M}")

    @property
    def sigma(self):
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class GammaHyper:
    """Gamma hyperprior on the smoothness weight: shape ``k``, scale ``beta``."""

    k: float
    beta: float

    def __post_init__(self):
        if not (self.k > 0 and self.beta > 0):
            raise ValueError(f"Gamma parameters must be positive, got k={self.k}, beta={self.beta}")


def _values(img):
    return img.intensities if isinstance(img, Image) else np.asarray(img, dtype=float)


def log_likelihood_from_residual(resid, noise: NoiseModel, d=None):
    """``-M ln(sqrt(2 pi) sigma) - ||resid||^2 / (2 sigma^2)``; sums the trailing ``d`` axes."""
    resid = np.asarray(resid, dtype=float)
    axes = None if d is None else tuple(range(-d, 0))
    ss = np.sum(resid**2, axis=axes)
    return -noise.M * (0.5 * math.log(2 * math.pi) + 0.5 * math.log(noise.sigma2)) - ss / (2 * noise.sigma2)


def log_likelihood(atlas, image, phi: DeformationField | None, noise: NoiseModel):
    """Gaussian intensity log-likelihood of ``image`` given the atlas deformed by ``phi``."""
    if noise.sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    target = _values(image)
    warped = _values(atlas) if phi is None else warp_image(atlas, phi).intensities
    if warped.shape != target.shape:
        raise ValueError(f"grid mismatch: {warped.shape} vs {target.shape}")
    return float(log_likelihood_from_residual(warped - target, noise))


def log_prior(v, op: OperatorCoeffs):
    """``1/2 ln|L| - 1/2 <Lv, Lv>`` (batched over leading axes of ``v``)."""
    op.lattice.check(v, "velocity")
    d = op.lattice.d
    quad = np.sum(op.L**2 * np.abs(v) ** 2, axis=tuple(range(-d - 1, 0)))
    return 0.5 * op.logdet - 0.5 * quad


def log_hyperprior(alpha, hyper: GammaHyper):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError(f"alpha must be positive, got {alpha}")
    k, beta = hyper.k, hyper.beta
    out = (k - 1.0) * np.log(alpha) - alpha / beta - k * math.log(beta) - gammaln(k)
    return float(out) if out.ndim == 0 else out


def log_posterior(state, n, alpha_n, sample=None):
    """Posterior terms of subject ``n`` at smoothness ``alpha_n``.

    ``state`` provides ``atlas``, ``images``, ``lattice``, ``noise``,
    ``hyper``, ``velocity(n, sample)`` and ``deformation(n, sample)``. The
    deformation is the one already shot from the stored velocity, so the
    likelihood does not vary with ``alpha_n``.
    """
    v = state.velocity(n, sample)
    op = build_operator(state.lattice, alpha_n)
    phi = state.deformation(n, sample)
    return (
        log_likelihood(state.atlas, state.images[n], phi, state.noise)
        + float(log_prior(v, op))
        + log_hyperprior(alpha_n, state.hyper)
    )
