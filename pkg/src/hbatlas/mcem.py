"""Monte Carlo EM for atlas building with per-subject smoothness weights.

E-step: HMC draws ``S`` smoothness samples ``alpha_nj`` per subject.
M-step: gradient ascent on the per-sample initial velocities, then the
closed-form atlas, noise-variance and Gamma-hyperparameter updates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, polygamma

from .adjoint import objective, objective_and_gradient
from .bayes_model import GammaHyper, NoiseModel, log_hyperprior, log_likelihood_from_residual, log_prior
from .fourier_field import FrequencyLattice, build_operator
from .geodesic import (
    DeformationField,
    Image,
    deformation_from_displacement,
    integrate_epdiff,
    integrate_flow,
    integrate_inverse_flow,
    jacobian_determinant,
    warp_image,
)
from .hmc_sampler import AlphaPotential, AlphaSamples, HmcConfig, chain_rng, hmc_sample

log = logging.getLogger(__name__)


class DegenerateDeformationError(ArithmeticError):
    pass


class HyperparameterConvergenceError(ArithmeticError):
    pass


class NoProgressWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class McemConfig:
    em_iterations: int = 50
    tol: float = 1e-4
    velocity_steps: int = 3
    # initial trust radius for a velocity step, as max coefficient change
    velocity_step: float = 0.5
    max_backtracks: int = 8
    T: int = 10
    hmc: HmcConfig = field(default_factory=HmcConfig)
    alpha_init: float = 10.0
    k_init: float = 9.0
    beta_init: float = 0.1
    sigma_init: float = 0.05
    sigma2_floor: float = 1e-10
    jacobian_floor: float = 1e-6
    k_cap: float = 1e6

    def __post_init__(self):
        if self.em_iterations < 1 or self.velocity_steps < 0 or self.T < 1:
            raise ValueError(f"invalid iteration counts in {self}")
        if not (self.tol > 0 and self.velocity_step > 0):
            raise ValueError("tolerances and step sizes must be positive")
        if not (self.alpha_init > 0 and self.k_init > 0 and self.beta_init > 0 and self.sigma_init > 0):
            raise ValueError("initial parameters must be positive")

    @property
    def S(self):
        return self.hmc.n_samples


@dataclass
class ModelState:
    """Atlas, per-(subject, sample) velocities and the population parameters."""

    atlas: np.ndarray
    images: np.ndarray
    lattice: FrequencyLattice
    velocities: np.ndarray  # (N, S, d, *dims) complex
    alphas: np.ndarray  # (N, S) smoothness samples paired with the velocities
    noise: NoiseModel
    hyper: GammaHyper
    T: int = 10
    spacing: tuple = None
    alpha_samples: list = field(default_factory=list)
    chain_state: np.ndarray = None  # last alpha of each subject's chain
    phi: np.ndarray = None  # (N, S, d, *full) position maps
    phi_inv: np.ndarray = None
    warped: np.ndarray = None  # (N, S, *full) atlas o phi

    @property
    def N(self):
        return self.images.shape[0]

    @property
    def S(self):
        return self.velocities.shape[1]

    @property
    def M(self):
        return int(np.prod(self.images.shape[1:]))

    @property
    def d(self):
        return self.lattice.d

    def velocity(self, n, sample=None):
        if sample is None:
            return self.velocities[n].mean(axis=0)
        return self.velocities[n, sample]

    def deformation(self, n, sample=None):
        if self.phi is None:
            return DeformationField.identity(self.lattice.full_dims, self.spacing)
        j = 0 if sample is None else sample
        return DeformationField(self.phi[n, j], self.spacing)

    def mean_alpha(self):
        return self.alphas.mean(axis=1)


def initial_state(images, lattice: FrequencyLattice, config: McemConfig, spacing=None) -> ModelState:
    images = np.asarray(images, dtype=float)
    if images.shape[0] < 2:
        raise ValueError("atlas building needs at least two images")
    N, S, d = images.shape[0], config.S, lattice.d
    state = ModelState(
        atlas=images.mean(axis=0),
        images=images,
        lattice=lattice,
        velocities=np.zeros((N, S, d) + lattice.dims, dtype=complex),
        alphas=np.full((N, S), float(config.alpha_init)),
        noise=NoiseModel(config.sigma_init**2, int(np.prod(images.shape[1:]))),
        hyper=GammaHyper(config.k_init, config.beta_init),
        T=config.T,
        spacing=spacing,
        chain_state=np.full(N, float(config.alpha_init)),
    )
    refresh_deformations(state)
    return state


def refresh_deformations(state: ModelState, inverse=True):
    """Shoot every stored velocity with its own smoothness weight."""
    N, S, d = state.N, state.S, state.d
    lat = state.lattice
    v = state.velocities.reshape((N * S, d) + lat.dims)
    op = build_operator(lat, state.alphas.reshape(-1))
    traj = integrate_epdiff(v, op, state.T)
    full = lat.full_dims
    phi = deformation_from_displacement(integrate_flow(traj), lat).map
    state.phi = phi.reshape((N, S, d) + full)
    if inverse:
        phi_inv = deformation_from_displacement(integrate_inverse_flow(traj), lat).map
        state.phi_inv = phi_inv.reshape((N, S, d) + full)
    state.warped = warp_image(state.atlas, DeformationField(state.phi, state.spacing)).intensities


def sample_terms(state: ModelState):
    """Per-(n, j) log-posterior terms ``E_nj`` at the current parameters."""
    d = state.d
    resid = state.warped - state.images[:, None]
    ll = log_likelihood_from_residual(resid, state.noise, d=d)
    op = build_operator(state.lattice, state.alphas)
    lp = log_prior(state.velocities, op)
    lh = log_hyperprior(state.alphas, state.hyper)
    return ll + lp + lh


def q_estimate(state: ModelState):
    """Monte Carlo ``Q = (1/S) sum_n sum_j E_nj`` and its standard error."""
    terms = sample_terms(state)
    per_sample = terms.sum(axis=0)  # q_j
    S = per_sample.size
    q = float(per_sample.mean())
    se = float(per_sample.std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
    return q, se


def e_step(state: ModelState, config: McemConfig, iteration: int = 0):
    """Run one HMC chain per subject; store the samples and return the fresh ``Q``."""
    lat = state.lattice
    results = []
    for n in range(state.N):
        U = AlphaPotential(state.hyper, lat, state.velocity(n))
        rng = chain_rng(config.hmc.seed, iteration, n)
        res = hmc_sample(U, float(state.chain_state[n]), config.hmc, rng=rng, subject=n)
        results.append(res)
        state.chain_state[n] = res.samples[-1]
        state.alphas[n] = res.samples
    state.alpha_samples = results
    return q_estimate(state)


def update_velocities(state: ModelState, config: McemConfig):
    """Preconditioned gradient ascent with backtracking on each ``v_nj``.

    Every sample starts from its subject's mean velocity. The ascent
    direction is the gradient smoothed by ``K^2``; a step is accepted when it
    satisfies an Armijo condition, otherwise it is halved. Returns the number
    of samples whose line search was exhausted on the last step.
    """
    N, S, d = state.N, state.S, state.d
    lat = state.lattice
    B = N * S
    v = np.repeat(state.velocities.mean(axis=1), S, axis=0)
    alphas = state.alphas.reshape(-1)
    op = build_operator(lat, alphas)
    targets = np.repeat(state.images, S, axis=0)
    sigma2 = state.noise.sigma2
    trust = np.full(B, float(config.velocity_step))
    axes = tuple(range(-d - 1, 0))
    exhausted = np.zeros(B, dtype=bool)
    for _ in range(config.velocity_steps):
        J0, g, _ = objective_and_gradient(v, op, state.atlas, targets, sigma2, state.T)
        direction = op.K**2 * g
        slope = np.sum(np.real(np.conj(g) * direction), axis=axes)
        dmax = np.max(np.abs(direction), axis=axes)
        # J <= 0 everywhere, so a value already at zero up to rounding is the optimum
        at_max = -J0 <= 1e-12 * state.M
        active = (slope > 1e-12 * np.maximum(1.0, np.abs(J0))) & (dmax > 0) & ~at_max
        exhausted[:] = False
        todo = np.flatnonzero(active)
        for _ in range(config.max_backtracks + 1):
            if todo.size == 0:
                break
            step = trust[todo] / dmax[todo]
            shape = (-1,) + (1,) * (d + 1)
            trial = v[todo] + step.reshape(shape) * direction[todo]
            sub_op = build_operator(lat, alphas[todo])
            J1 = objective(trial, sub_op, state.atlas, targets[todo], sigma2, state.T)
            ok = np.isfinite(J1) & (J1 >= J0[todo] + 1e-4 * step * slope[todo])
            good = todo[ok]
            v[good] = trial[ok]
            trust[good] = np.minimum(trust[good] * 1.5, 4.0 * config.velocity_step)
            bad = todo[~ok]
            trust[bad] *= 0.5
            todo = bad
        exhausted[todo] = True
    n_bad = int(exhausted.sum())
    if n_bad:
        msg = f"velocity line search made no progress for {n_bad} of {B} samples; velocities kept"
        log.warning(msg)
        warnings.warn(msg, NoProgressWarning, stacklevel=2)
    state.velocities = v.reshape(state.velocities.shape)
    return n_bad


def update_atlas(images, phi_inv, jacobian_floor=1e-6, spacing=None) -> Image:
    """Closed-form atlas: Jacobian-weighted average of subjects pulled back by ``phi^-1``.

    ``images`` is ``(N, *full)``; ``phi_inv`` is a position map of shape
    ``(N, S, d, *full)`` (or a :class:`DeformationField` holding one).
    """
    images = np.asarray(images, dtype=float)
    pm = phi_inv.map if isinstance(phi_inv, DeformationField) else np.asarray(phi_inv, dtype=float)
    d = images.ndim - 1
    if pm.ndim == d + 2:
        pm = pm[:, None]
    if pm.shape[0] != images.shape[0]:
        raise ValueError("one set of inverse maps per image is required")
    field_ = DeformationField(pm, spacing)
    pulled = warp_image(images[:, None], field_).intensities
    jac = jacobian_determinant(field_)
    low = jac < jacobian_floor
    if np.any(low):
        log.info("clamped %d Jacobian weights below %g", int(low.sum()), jacobian_floor)
        jac = np.maximum(jac, jacobian_floor)
    num = np.sum(pulled * jac, axis=(0, 1))
    den = np.sum(jac, axis=(0, 1))
    if not np.all(np.isfinite(den)) or np.any(den <= 0):
        raise DegenerateDeformationError("Jacobian weights vanish at some voxel")
    return Image(num / den, spacing)


def update_sigma(warped, images):
    """``sigma^2 = (1/MNS) sum_n sum_j ||I o phi_nj - I_n||^2``."""
    warped = np.asarray(warped, dtype=float)
    images = np.asarray(images, dtype=float)
    if warped.ndim == images.ndim:
        warped = warped[:, None]
    resid = warped - images[:, None]
    return float(np.mean(resid**2))


def inverse_digamma(y, tol=1e-14, max_iter=100):
    """Solve ``digamma(x) = y`` by Newton iteration from Minka's starting point."""
    y = float(y)
    x = math.exp(y) + 0.5 if y >= -2.22 else -1.0 / (y - digamma(1.0))
    for _ in range(max_iter):
        step = (digamma(x) - y) / polygamma(1, x)
        x_new = x - step
        if x_new <= 0:
            x_new = 0.5 * x
        if abs(x_new - x) <= tol * max(1.0, x):
            return x_new
        x = x_new
    return x


def update_hyperparams(alpha_samples, k_cap=1e6, tol=1e-10, max_iter=200):
    """Joint solution of the Gamma shape/scale equations for the sampled alphas.

    ``k = psi^-1(mean(ln a) - ln beta)`` and ``beta = mean(a) / k``.
    Substituting the second into the first leaves one equation in ``k``,
    ``psi(k) - ln k = mean(ln a) - ln mean(a)``, solved by Newton's method on
    ``1/k``; ``beta`` follows. Zero log-spread (all samples equal) caps ``k``.
    """
    a = np.asarray([s.samples for s in alpha_samples] if isinstance(alpha_samples, list)
                   and alpha_samples and isinstance(alpha_samples[0], AlphaSamples)
                   else alpha_samples, dtype=float).ravel()
    if a.size == 0 or np.any(a <= 0):
        raise ValueError("hyperparameter update needs positive samples")
    mean = float(a.mean())
    mean_log = float(np.mean(np.log(a)))
    s = math.log(mean) - mean_log
    if s <= 0 or 1.0 / (2.0 * s) > k_cap:
        log.warning("alpha samples have (near) zero log-spread; shape capped at %g", k_cap)
        k = float(k_cap)
        return k, mean / k
    # Minka's closed-form start, then Newton on 1/k
    k = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(max_iter):
        f = math.log(k) - digamma(k) - s
        fp = 1.0 / k - polygamma(1, k)
        inv = 1.0 / k + f / (k * k * fp)
        k_new = 1.0 / inv if inv > 0 else 2.0 * k
        k_new = min(k_new, k_cap)
        if abs(k_new - k) <= tol * k:
            k = k_new
            break
        k = k_new
    else:
        raise HyperparameterConvergenceError(
            f"Gamma shape did not converge: k={k}, log-spread={s}, n={a.size}"
        )
    beta = mean / k
    return float(k), float(beta)


@dataclass
class HistoryRow:
    iteration: int
    q: float
    q_se: float
    q_estep: float
    sigma2: float
    k: float
    beta: float
    alpha_mean: list
    accept: list
    q_drop: bool = False
    velocity_failures: int = 0


def m_step(state: ModelState, config: McemConfig):
    fails = update_velocities(state, config)
    refresh_deformations(state)
    state.atlas = update_atlas(state.images, state.phi_inv, config.jacobian_floor).intensities
    state.warped = warp_image(state.atlas, DeformationField(state.phi, state.spacing)).intensities
    sigma2 = max(update_sigma(state.warped, state.images), config.sigma2_floor)
    state.noise = replace(state.noise, sigma2=sigma2)
    k, beta = update_hyperparams(state.alphas, k_cap=config.k_cap)
    state.hyper = GammaHyper(k, beta)
    return fails


def run_mcem(images, lattice: FrequencyLattice, config: McemConfig, spacing=None,
             callback=None, state=None):
    """Alternate E- and M-steps; returns ``(state, history)``.

    ``callback(state, row)`` runs after every iteration (checkpointing). If a
    step raises, the history gathered so far is attached to the exception as
    ``exc.history`` before it propagates.
    """
    if state is None:
        state = initial_state(images, lattice, config, spacing)
    history: list[HistoryRow] = []
    small = 0
    try:
        for it in range(config.em_iterations):
            q_e, _ = e_step(state, config, it)
            fails = m_step(state, config)
            q, se = q_estimate(state)
            drop = False
            if history:
                prev = history[-1]
                band = 3.0 * math.hypot(se, prev.q_se)
                if q < prev.q - band:
                    drop = True
                    log.warning("Q decreased by %.4g (> 3 standard errors) at iteration %d",
                                prev.q - q, it)
            row = HistoryRow(
                iteration=it,
                q=q,
                q_se=se,
                q_estep=q_e,
                sigma2=state.noise.sigma2,
                k=state.hyper.k,
                beta=state.hyper.beta,
                alpha_mean=[float(m) for m in state.mean_alpha()],
                accept=[float(s.accept_rate) for s in state.alpha_samples],
                q_drop=drop,
                velocity_failures=fails,
            )
            history.append(row)
            log.info("iter %d: Q=%.6g (se %.3g) sigma2=%.4g k=%.4g beta=%.4g", it, q, se,
                     row.sigma2, row.k, row.beta)
            if callback is not None:
                callback(state, row)
            if len(history) > 1:
                rel = abs(q - history[-2].q) / max(abs(history[-2].q), 1e-300)
                small = small + 1 if rel < config.tol else 0
                if small >= 2:
                    break
    except Exception as exc:
        exc.history = history
        raise
    return state, history
