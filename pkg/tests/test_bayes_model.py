import math

import numpy as np
import pytest

from hbatlas.bayes_model import (
    GammaHyper,
    NoiseModel,
    log_hyperprior,
    log_likelihood,
    log_posterior,
    log_prior,
)
from hbatlas.fourier_field import FrequencyLattice, build_operator, random_hermitian
from hbatlas.geodesic import DeformationField, identity_grid
from hbatlas.hmc_sampler import HmcConfig, potential
from hbatlas.mcem import McemConfig, initial_state

from oracles import gamma_logpdf, lngamma


def test_parameter_validation():
    with pytest.raises(ValueError):
        NoiseModel(0.0, 10)
    with pytest.raises(ValueError):
        NoiseModel(1.0, 0)
    with pytest.raises(ValueError):
        GammaHyper(0.0, 1.0)
    assert NoiseModel(0.25, 4).sigma == 0.5


@pytest.mark.parametrize("alpha,k,beta", [(0.5, 9.0, 0.1), (10.0, 9.0, 0.1), (3.0, 1.5, 2.0), (120.0, 30.0, 5.0)])
def test_hyperprior_matches_gamma_oracle(alpha, k, beta):
    assert math.isclose(log_hyperprior(alpha, GammaHyper(k, beta)), gamma_logpdf(alpha, k, beta),
                        rel_tol=1e-10, abs_tol=1e-10)


def test_lanczos_oracle_sanity():
    assert math.isclose(lngamma(5.0), math.log(24.0), rel_tol=1e-12)
    assert math.isclose(lngamma(0.5), 0.5 * math.log(math.pi), rel_tol=1e-12)


def test_likelihood_identity_and_shift():
    rng = np.random.default_rng(0)
    atlas = rng.random((6, 6))
    noise = NoiseModel(0.04, 36)
    const = -36 * (0.5 * math.log(2 * math.pi) + 0.5 * math.log(0.04))
    assert math.isclose(log_likelihood(atlas, atlas, None, noise), const)
    other = atlas + 0.1
    phi = DeformationField(identity_grid((6, 6)))
    assert math.isclose(log_likelihood(atlas, other, phi, noise), const - 36 * 0.01 / 0.08)


def test_prior_is_gaussian_in_v():
    lat = FrequencyLattice((5, 5), (8, 8))
    op = build_operator(lat, 4.0)
    v = random_hermitian(lat, np.random.default_rng(1), n_components=2)
    quad = np.sum(op.L**2 * np.abs(v) ** 2)
    assert math.isclose(log_prior(v, op), 0.5 * op.logdet - 0.5 * quad)
    assert math.isclose(log_prior(2 * v, op) - log_prior(0 * v, op), -2.0 * quad)


def test_posterior_alpha_dependence_equals_negative_potential():
    rng = np.random.default_rng(2)
    images = rng.random((2, 8, 8))
    lat = FrequencyLattice.from_bandlimit(7, (8, 8))
    cfg = McemConfig(hmc=HmcConfig(n_samples=2))
    state = initial_state(images, lat, cfg)
    state.velocities = random_hermitian(lat, rng, n_components=2, scale=0.01, batch=(2, 2))
    n = 1
    v = state.velocity(n)
    a1, a2 = 4.0, 11.0
    lhs = log_posterior(state, n, a1) - log_posterior(state, n, a2)
    rhs = -(potential(a1, v, lat, state.hyper) - potential(a2, v, lat, state.hyper))
    assert math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-9)
