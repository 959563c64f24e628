"""Synthetic populations: a labelled base shape deformed by shooting prior draws."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fourier_field import FrequencyLattice, build_operator, hermitian_part
from .geodesic import DeformationField, jacobian_determinant, shoot, warp_image
from .metrics import propagate_segmentation

log = logging.getLogger(__name__)

SHAPES = ("bullseye", "blob")


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, *full)
    labels: np.ndarray  # (N, *full) int
    base_image: np.ndarray
    base_labels: np.ndarray
    velocities: np.ndarray  # (N, d, *lattice) ground-truth initial velocities
    alphas: np.ndarray  # (N,) ground-truth smoothness weights
    phi: np.ndarray  # (N, d, *full)
    phi_inv: np.ndarray
    lattice: FrequencyLattice

    @property
    def N(self):
        return self.images.shape[0]


def base_shape(kind, full_dims, smooth=0.7, ring_period=6.0, ring_amplitude=0.2):
    """Intensity image and label map of the undeformed shape.

    ``bullseye``: a disk inside two annuli on a dim background; the annuli
    carry a fine radial ring texture that misregistration washes out.
    ``blob``: an off-centre ellipse with an inner core.
    """
    full_dims = tuple(int(n) for n in full_dims)
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in full_dims], indexing="ij")
    centre = [(n - 1) / 2.0 for n in full_dims]
    scale = min(full_dims) / 64.0
    labels = np.zeros(full_dims, dtype=np.int64)
    if kind == "bullseye":
        r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, centre)))
        labels[r < 22 * scale] = 1
        labels[r < 15 * scale] = 2
        labels[r < 8 * scale] = 3
        levels = np.array([0.1, 0.8, 0.4, 1.0])
        texture = np.where((labels == 1) | (labels == 2), ring_amplitude * np.cos(2 * np.pi * r / ring_period), 0.0)
    elif kind == "blob":
        axes = [20 * scale, 13 * scale, 16 * scale][: len(full_dims)]
        shift = [2 * scale, -3 * scale, 0.0][: len(full_dims)]
        q = sum(((g - c - s) / a) ** 2 for g, c, s, a in zip(grids, centre, shift, axes))
        labels[q < 1.0] = 1
        labels[q < 0.3] = 2
        levels = np.array([0.1, 0.7, 1.0])
        texture = 0.0
    else:
        raise ValueError(f"unknown shape family {kind!r}; expected one of {SHAPES}")
    image = levels[labels] + texture
    if smooth > 0:
        image = gaussian_filter(image, smooth, mode="nearest")
    return image, labels


def prior_velocity(lattice: FrequencyLattice, alpha, rng):
    """One draw ``v = K z`` from the Gaussian prior with covariance ``K^2`` at ``alpha``."""
    op = build_operator(lattice, alpha)
    shape = (lattice.d,) + lattice.dims
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return hermitian_part(op.K * z, lattice.d)


def generate_synthetic(kind="bullseye", N=10, magnitude=1.0, seed=0, full_dims=(64, 64),
                       alphas=None, alpha_range=(8.0, 64.0), bandlimit=15, T=10,
                       smooth=0.7) -> SyntheticDataset:
    """``N`` deformed copies of a base shape with their ground truth.

    Each subject's initial velocity is drawn from the prior at its own
    ``alpha`` (log-uniform over ``alpha_range`` unless given) and multiplied
    by ``magnitude``, so ``magnitude=1`` gives exact prior draws and 0 gives
    identical images. Draws whose
    deformation folds (Jacobian determinant <= 0 somewhere) are shrunk by
    halves until they do not.
    """
    if N < 2:
        raise ValueError("a population needs N >= 2")
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    rng = np.random.default_rng(seed)
    full_dims = tuple(int(n) for n in full_dims)
    lattice = FrequencyLattice.from_bandlimit(bandlimit, full_dims)
    if alphas is None:
        lo, hi = np.log(alpha_range[0]), np.log(alpha_range[1])
        alphas = np.exp(np.linspace(lo, hi, N))
        rng.shuffle(alphas)
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (N,) or np.any(alphas <= 0):
        raise ValueError("need one positive alpha per subject")
    image, labels = base_shape(kind, full_dims, smooth)

    vels, phis, invs = [], [], []
    for n in range(N):
        v = magnitude * prior_velocity(lattice, alphas[n], rng)
        op = build_operator(lattice, alphas[n])
        for _ in range(20):
            phi, phi_inv, _ = shoot(v, op, T)
            if np.min(jacobian_determinant(phi)) > 0 and np.min(jacobian_determinant(phi_inv)) > 0:
                break
            log.info("subject %d folded; halving its velocity", n)
            v = 0.5 * v
        else:
            raise ArithmeticError(f"could not generate a diffeomorphism for subject {n}")
        vels.append(v)
        phis.append(phi.map)
        invs.append(phi_inv.map)
    phi = np.stack(phis)
    imgs = warp_image(image, DeformationField(phi)).intensities
    labs = propagate_segmentation(labels, DeformationField(phi))
    return SyntheticDataset(imgs, np.asarray(labs), image, labels, np.stack(vels), alphas,
                            phi, np.stack(invs), lattice)
