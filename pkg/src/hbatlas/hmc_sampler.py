"""Hamiltonian Monte Carlo over a subject's smoothness weight alpha."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bayes_model import GammaHyper
from .fourier_field import FrequencyLattice, laplacian_symbol

log = logging.getLogger(__name__)


class ChainStuckWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class HmcConfig:
    n_samples: int = 10
    n_leapfrog: int = 10
    burn_in: int = 50
    # absolute step size; when None it is step_scale * alpha at chain start
    step_size: float | None = None
    step_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.n_leapfrog < 1 or self.burn_in < 0:
            raise ValueError(f"invalid HMC counts in {self}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")

    def step_for(self, alpha0):
        return self.step_size if self.step_size is not None else self.step_scale * alpha0


@dataclass
class AlphaSamples:
    subject: int
    samples: np.ndarray
    accept_rate: float
    step_size: float
    n_boundary_rejects: int = 0
    stuck: bool = False
    energies: np.ndarray = field(default=None, repr=False)

    @property
    def mean(self):
        return float(np.mean(self.samples))


class AlphaPotential:
    """``U(alpha) = -ln p(alpha | v, k, beta)`` restricted to its alpha-dependent terms.

    ``U = -[3/2 sum ln(1 + alpha A) - 1/2 sum (1 + alpha A)^6 |v|^2
            + (k - 1) ln alpha - alpha / beta]``

    With ``include_prior=False`` only the Gamma terms remain.
    """

    def __init__(self, hyper: GammaHyper, lattice: FrequencyLattice | None = None, v=None,
                 include_prior=True):
        self.hyper = hyper
        self.include_prior = include_prior and lattice is not None
        if self.include_prior:
            A = laplacian_symbol(lattice).ravel()
            d = lattice.d
            if v is None:
                E = np.zeros_like(A)
            else:
                lattice.check(v, "velocity")
                E = np.sum(np.abs(v) ** 2, axis=-d - 1).ravel()
            self.A = A
            self.E = E

    def __call__(self, alpha):
        if alpha <= 0:
            return math.inf
        k, beta = self.hyper.k, self.hyper.beta
        u = -((k - 1.0) * math.log(alpha) - alpha / beta)
        if self.include_prior:
            s = 1.0 + alpha * self.A
            u -= 1.5 * np.sum(np.log(s)) - 0.5 * np.sum(s**6 * self.E)
        return float(u)

    def grad(self, alpha):
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        k, beta = self.hyper.k, self.hyper.beta
        g = -((k - 1.0) / alpha - 1.0 / beta)
        if self.include_prior:
            s = 1.0 + alpha * self.A
            g -= 1.5 * np.sum(self.A / s) - 3.0 * np.sum(s**5 * self.A * self.E)
        return float(g)


def potential(alpha, v, lattice, hyper):
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return AlphaPotential(hyper, lattice, v)(alpha)


def potential_grad(alpha, v, lattice, hyper):
    return AlphaPotential(hyper, lattice, v).grad(alpha)


def leapfrog(alpha, gamma, eps, n_steps, grad_U):
    """Kick-drift-kick integration of ``dalpha/dt = gamma``, ``dgamma/dt = -U'(alpha)``.

    Stops early and returns the offending state if alpha leaves ``(0, inf)``;
    callers treat that as a rejected proposal.
    """
    gamma = gamma - 0.5 * eps * grad_U(alpha)
    for step in range(n_steps):
        alpha = alpha + eps * gamma
        if not alpha > 0:
            return alpha, gamma
        if step < n_steps - 1:
            gamma = gamma - eps * grad_U(alpha)
    gamma = gamma - 0.5 * eps * grad_U(alpha)
    return alpha, gamma


def hmc_sample(U, alpha0, config: HmcConfig, rng=None, subject=0) -> AlphaSamples:
    """Draw ``config.n_samples`` post-burn-in states of a chain started at ``alpha0``.

    ``U`` is callable with a ``grad`` method (e.g. :class:`AlphaPotential`).
    """
    if not alpha0 > 0:
        raise ValueError("chain must start at a positive alpha")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    eps = config.step_for(alpha0)
    alpha = float(alpha0)
    u_cur = U(alpha)
    samples = np.empty(config.n_samples)
    energies = np.empty(config.n_samples)
    accepted = 0
    boundary = 0
    total = config.burn_in + config.n_samples
    for it in range(total):
        gamma = rng.standard_normal()
        h0 = u_cur + 0.5 * gamma * gamma
        a_new, g_new = leapfrog(alpha, gamma, eps, config.n_leapfrog, U.grad)
        # draw the uniform unconditionally so the stream does not depend on outcomes
        log_u = math.log(rng.uniform())
        if a_new > 0 and np.isfinite(a_new):
            u_new = U(a_new)
            h1 = u_new + 0.5 * g_new * g_new
            if np.isfinite(h1) and log_u < h0 - h1:
                alpha, u_cur = a_new, u_new
                if it >= config.burn_in:
                    accepted += 1
        else:
            boundary += 1
        if it >= config.burn_in:
            samples[it - config.burn_in] = alpha
            energies[it - config.burn_in] = u_cur
    rate = accepted / config.n_samples
    stuck = accepted == 0
    if stuck:
        msg = (f"HMC chain for subject {subject} rejected all {config.n_samples} proposals "
               f"(step {eps:.3g}, alpha {alpha:.4g}, {boundary} boundary crossings)")
        log.warning(msg)
        warnings.warn(msg, ChainStuckWarning, stacklevel=2)
    return AlphaSamples(subject, samples, rate, eps, boundary, stuck, energies)


def chain_rng(seed, iteration, subject):
    """Independent stream per (EM iteration, subject) under one master seed."""
    return np.random.default_rng([int(seed), int(iteration), int(subject)])
