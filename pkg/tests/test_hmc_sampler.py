import warnings

import numpy as np
import pytest

from hbatlas.bayes_model import GammaHyper
from hbatlas.fourier_field import FrequencyLattice, random_hermitian
from hbatlas.hmc_sampler import (
    AlphaPotential,
    ChainStuckWarning,
    HmcConfig,
    chain_rng,
    hmc_sample,
    leapfrog,
    potential,
    potential_grad,
)
from hbatlas.synthetic import prior_velocity


def _pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    lat = FrequencyLattice.from_bandlimit(9, (16, 16))
    for _ in range(n):
        alpha = float(rng.uniform(0.5, 30.0))
        v = random_hermitian(lat, rng, n_components=2, scale=float(10 ** rng.uniform(-4, -2)))
        yield alpha, v, lat


def test_potential_gradient_matches_central_differences():
    hyper = GammaHyper(9.0, 0.1)
    for alpha, v, lat in _pairs(12):
        h = 1e-5 * alpha
        fd = (potential(alpha + h, v, lat, hyper) - potential(alpha - h, v, lat, hyper)) / (2 * h)
        an = potential_grad(alpha, v, lat, hyper)
        assert abs(fd - an) / max(abs(an), 1e-12) < 1e-5


def test_potential_domain():
    lat = FrequencyLattice((5, 5), (8, 8))
    U = AlphaPotential(GammaHyper(2.0, 1.0), lat)
    assert U(0.0) == np.inf and U(-1.0) == np.inf
    with pytest.raises(ValueError):
        U.grad(0.0)
    with pytest.raises(ValueError):
        potential(-1.0, np.zeros((2, 5, 5)), lat, GammaHyper(2.0, 1.0))


def test_leapfrog_is_reversible():
    U = AlphaPotential(GammaHyper(9.0, 0.1))
    for a0, g0 in [(0.9, 0.3), (1.5, -0.7), (0.4, 1.1)]:
        a1, g1 = leapfrog(a0, g0, 0.05, 20, U.grad)
        a2, g2 = leapfrog(a1, -g1, 0.05, 20, U.grad)
        assert abs(a2 - a0) < 1e-10 and abs(-g2 - g0) < 1e-10


def test_gamma_target_moments():
    cfg = HmcConfig(n_samples=5000, n_leapfrog=10, burn_in=200, step_size=0.1, seed=0)
    res = hmc_sample(AlphaPotential(GammaHyper(9.0, 0.1)), 1.0, cfg)
    assert abs(res.samples.mean() - 0.9) / 0.9 < 0.05
    assert abs(res.samples.var() - 0.09) / 0.09 < 0.15
    assert 0.5 < res.accept_rate <= 1.0


def test_fixed_seed_is_bit_reproducible():
    cfg = HmcConfig(n_samples=50, burn_in=10, seed=3)
    U = AlphaPotential(GammaHyper(9.0, 0.1))
    a = hmc_sample(U, 1.0, cfg, rng=chain_rng(3, 2, 1))
    b = hmc_sample(U, 1.0, cfg, rng=chain_rng(3, 2, 1))
    c = hmc_sample(U, 1.0, cfg, rng=chain_rng(3, 2, 2))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_step_size_rule():
    assert HmcConfig().step_for(10.0) == pytest.approx(0.1)
    assert HmcConfig(step_size=0.3).step_for(10.0) == 0.3
    with pytest.raises(ValueError):
        HmcConfig(n_samples=0)


def test_stuck_chain_warns():
    # an absurd step size overshoots into alpha <= 0 or huge energy every time
    cfg = HmcConfig(n_samples=5, burn_in=0, step_size=50.0, seed=0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = hmc_sample(AlphaPotential(GammaHyper(200.0, 0.005)), 1.0, cfg)
    assert res.stuck and res.accept_rate == 0.0
    assert np.all(res.samples == 1.0)
    assert any(issubclass(w.category, ChainStuckWarning) for w in rec)


def test_subject_posterior_prefers_smoother_weight_for_smaller_velocity():
    lat = FrequencyLattice.from_bandlimit(9, (16, 16))
    rng = np.random.default_rng(4)
    v = prior_velocity(lat, 20.0, rng)
    hyper = GammaHyper(2.0, 100.0)
    cfg = HmcConfig(n_samples=300, burn_in=100, seed=1)
    big = hmc_sample(AlphaPotential(hyper, lat, 1.5 * v), 20.0, cfg)
    small = hmc_sample(AlphaPotential(hyper, lat, v), 20.0, cfg)
    assert not (big.stuck or small.stuck)
    assert small.mean > big.mean
