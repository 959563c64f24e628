import math
import warnings

import numpy as np
import pytest

from hbatlas.adjoint import objective
from hbatlas.fourier_field import FrequencyLattice, build_operator
from hbatlas.geodesic import DeformationField, identity_grid, jacobian_determinant, warp_image
from hbatlas.hmc_sampler import HmcConfig
from hbatlas.mcem import (
    DegenerateDeformationError,
    McemConfig,
    e_step,
    initial_state,
    inverse_digamma,
    q_estimate,
    run_mcem,
    update_atlas,
    update_hyperparams,
    update_sigma,
    update_velocities,
)
from hbatlas.synthetic import base_shape, generate_synthetic

from oracles import digamma, mean_of_squares


def _ident(N, S, full):
    return np.broadcast_to(identity_grid(full), (N, S, len(full)) + full).copy()


def test_atlas_identity_transforms_is_voxelwise_mean():
    rng = np.random.default_rng(0)
    images = rng.random((5, 12, 10))
    atlas = update_atlas(images, _ident(5, 3, (12, 10))).intensities
    assert np.max(np.abs(atlas - images.mean(axis=0))) < 1e-12


def test_atlas_single_subject_is_pullback():
    rng = np.random.default_rng(1)
    img = rng.random((1, 16, 16))
    m = identity_grid((16, 16)) + 0.3 * np.sin(identity_grid((16, 16)) / 3.0)
    atlas = update_atlas(img, m[None, None]).intensities
    np.testing.assert_allclose(atlas, warp_image(img[0], DeformationField(m)).intensities, atol=1e-12)


def test_atlas_of_shifted_copies_recovers_centre():
    full = (32, 32)
    g = identity_grid(full)
    blob = lambda c: np.exp(-((g[0] - c[0]) ** 2 + (g[1] - c[1]) ** 2) / 18.0)  # noqa: E731
    images = np.stack([blob((15.5, 13.5)), blob((15.5, 17.5))])
    inv = np.stack([g + np.array([0.0, -2.0])[:, None, None], g + np.array([0.0, 2.0])[:, None, None]])
    atlas = update_atlas(images, inv[:, None]).intensities
    inner = (slice(4, -4), slice(4, -4))
    assert np.max(np.abs(atlas - blob((15.5, 15.5)))[inner]) < 1e-12


def test_atlas_degenerate_weights():
    images = np.ones((2, 6, 6))
    nan_map = np.full((2, 1, 2, 6, 6), np.nan)
    with pytest.raises(DegenerateDeformationError):
        update_atlas(images, nan_map)


def test_atlas_first_order_condition():
    rng = np.random.default_rng(2)
    full = (16, 16)
    images = rng.random((3, 16, 16))
    inv = identity_grid(full) + 0.4 * rng.standard_normal((3, 2, 2) + full).clip(-1, 1)
    atlas = update_atlas(images, inv).intensities
    field_ = DeformationField(inv)
    pulled = warp_image(images[:, None], field_).intensities
    jac = np.maximum(jacobian_determinant(field_), 1e-6)

    def cost(a):
        return np.sum(jac * (a - pulled) ** 2)

    base = cost(atlas)
    for f in (0.99, 1.01):
        assert cost(atlas * f) > base
    assert cost(atlas + 0.01 * rng.standard_normal(full)) > base


def test_sigma_closed_forms():
    rng = np.random.default_rng(3)
    images = rng.random((2, 4, 4))
    assert update_sigma(np.stack([images, images], axis=1), images) == 0.0
    assert update_sigma(np.ones((1, 1, 4, 4)), np.zeros((1, 4, 4))) == 1.0
    warped = rng.random((3, 4, 5, 6))
    imgs = rng.random((3, 5, 6))
    assert abs(update_sigma(warped, imgs) - mean_of_squares(warped, imgs)) < 1e-12


def test_sigma_first_order_condition():
    rng = np.random.default_rng(4)
    warped = rng.random((3, 2, 6, 6))
    images = rng.random((3, 6, 6))
    s2 = update_sigma(warped, images)
    M, N, S = 36, 3, 2
    ss = np.sum((warped - images[:, None]) ** 2)

    def q(v):
        return -0.5 * M * N * S * math.log(v) - ss / (2 * v)

    assert q(s2) > q(0.99 * s2) and q(s2) > q(1.01 * s2)


@pytest.mark.parametrize("y", [-2.0, 0.0, 1.0, 5.0])
def test_inverse_digamma(y):
    x = inverse_digamma(y)
    assert abs(digamma(x) - y) < 1e-10


def test_hyperparams_recover_gamma():
    draws = np.random.default_rng(5).gamma(9.0, 0.1, size=100_000)
    k, beta = update_hyperparams(draws)
    assert abs(k - 9.0) / 9.0 < 0.03 and abs(beta - 0.1) / 0.1 < 0.03
    # both stationarity equations hold at the returned pair
    assert abs(digamma(k) - (np.mean(np.log(draws)) - math.log(beta))) < 1e-8
    assert abs(beta - draws.mean() / k) < 1e-8 * beta


def test_hyperparams_degenerate_samples_are_capped(caplog):
    k, beta = update_hyperparams(np.full(50, 2.5), k_cap=1e6)
    assert k == 1e6 and math.isclose(k * beta, 2.5)
    assert "capped" in caplog.text
    with pytest.raises(ValueError):
        update_hyperparams(np.array([1.0, -1.0]))


def _small_problem(N=3, S=2, seed=0, magnitude=0.5):
    ds = generate_synthetic(N=N, magnitude=magnitude, seed=seed, full_dims=(16, 16), bandlimit=7,
                            alpha_range=(2.0, 8.0))
    lat = FrequencyLattice.from_bandlimit(7, (16, 16))
    cfg = McemConfig(em_iterations=3, velocity_steps=2, hmc=HmcConfig(n_samples=S, burn_in=10, seed=seed))
    return ds, lat, cfg


def test_velocity_update_never_decreases_objective():
    ds, lat, cfg = _small_problem()
    state = initial_state(ds.images, lat, cfg)
    e_step(state, cfg, 0)
    before = objective(state.velocities.reshape((-1, 2) + lat.dims), build_operator(lat, state.alphas.ravel()),
                       state.atlas, np.repeat(ds.images, state.S, axis=0), state.noise.sigma2)
    update_velocities(state, cfg)
    after = objective(state.velocities.reshape((-1, 2) + lat.dims), build_operator(lat, state.alphas.ravel()),
                      state.atlas, np.repeat(ds.images, state.S, axis=0), state.noise.sigma2)
    assert np.all(after >= before)
    assert np.any(after > before)


def test_identical_images_keep_zero_velocity():
    img = base_shape("bullseye", (16, 16))[0]
    lat = FrequencyLattice.from_bandlimit(7, (16, 16))
    cfg = McemConfig(em_iterations=2, hmc=HmcConfig(n_samples=2, burn_in=5))
    state = initial_state(np.stack([img] * 3), lat, cfg)
    e_step(state, cfg, 0)
    assert update_velocities(state, cfg) == 0
    assert np.max(np.abs(state.velocities)) == 0.0


def test_run_is_deterministic_and_records_history():
    ds, lat, cfg = _small_problem()
    s1, h1 = run_mcem(ds.images, lat, cfg)
    s2, h2 = run_mcem(ds.images, lat, cfg)
    assert len(h1) == 3
    assert [r.q for r in h1] == [r.q for r in h2]
    assert np.array_equal(s1.atlas, s2.atlas)
    assert np.array_equal(s1.alphas, s2.alphas)
    for r in h1:
        assert len(r.alpha_mean) == 3 and len(r.accept) == 3 and r.sigma2 > 0


def test_history_attached_on_failure():
    ds, lat, cfg = _small_problem()
    calls = []

    def boom(state, row):
        calls.append(row)
        if len(calls) == 2:
            raise RuntimeError("disk full")

    with pytest.raises(RuntimeError) as info:
        run_mcem(ds.images, lat, cfg, callback=boom)
    assert len(info.value.history) == 2


def test_q_standard_error_shrinks_with_samples():
    ds, lat, _ = _small_problem(seed=1, magnitude=0.3)
    spreads = {}
    for S in (4, 16):
        cfg = McemConfig(hmc=HmcConfig(n_samples=S, burn_in=20, seed=0))
        state = initial_state(ds.images, lat, cfg)
        qs = []
        for rep in range(40):
            state.chain_state[:] = cfg.alpha_init
            qs.append(e_step(state, cfg, rep)[0])
        spreads[S] = np.std(qs)
    ratio = spreads[4] / spreads[16]
    # 1/sqrt(S) predicts 2; chain autocorrelation and finite repeats leave slack
    assert 1.3 < ratio < 3.2, ratio


def test_q_estimate_reports_standard_error():
    ds, lat, cfg = _small_problem()
    state = initial_state(ds.images, lat, cfg)
    e_step(state, cfg, 0)
    q, se = q_estimate(state)
    assert np.isfinite(q) and se >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        McemConfig(em_iterations=0)
    with pytest.raises(ValueError):
        McemConfig(alpha_init=-1.0)
    with pytest.raises(ValueError):
        initial_state(np.zeros((1, 8, 8)), FrequencyLattice((5, 5), (8, 8)), McemConfig())


def test_no_progress_warning_category_exists():
    from hbatlas.mcem import NoProgressWarning

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(NoProgressWarning):
            warnings.warn("x", NoProgressWarning)
