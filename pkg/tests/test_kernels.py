import numpy as np
import pytest

from hbatlas import _pykernels, kernels

from oracles import bilinear

IMPLS = sorted(kernels.backends())


def points(p):
    """Scattered points ``(d, K)`` as a degenerate ``(d, K, 1, ...)`` query grid."""
    d = p.shape[0]
    return p.reshape(p.shape + (1,) * (d - 1))


def at(img, p, d, **kw):
    out = kernels.sample(img, points(p), d, **kw)
    if isinstance(out, tuple):
        return out[0].reshape(-1), out[1].reshape(d, -1)
    return out.reshape(-1)


def test_backend_selected():
    assert kernels.BACKEND in kernels.backends()
    assert "python" in IMPLS


@pytest.mark.parametrize("impl", IMPLS)
def test_bilinear_matches_oracle(impl):
    rng = np.random.default_rng(0)
    img = rng.standard_normal((9, 11))
    pts = np.stack([rng.uniform(0, 8, 40), rng.uniform(0, 10, 40)])
    vals = at(img, pts, 2, impl=kernels.backends()[impl])
    ref = [bilinear(img, y, x) for y, x in pts.T]
    np.testing.assert_allclose(vals, ref, atol=1e-13)


@pytest.mark.parametrize("impl", IMPLS)
def test_grid_points_and_clamping(impl):
    mod = kernels.backends()[impl]
    img = np.arange(20.0).reshape(4, 5)
    grid = np.stack(np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij"))
    np.testing.assert_array_equal(kernels.sample(img, grid, 2, impl=mod), img)
    far = np.array([[-3.0, 10.0], [-2.0, 20.0]])
    vals, g = at(img, far, 2, grad=True, impl=mod)
    np.testing.assert_array_equal(vals, [img[0, 0], img[3, 4]])
    np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("impl", IMPLS)
def test_wrap_mode_is_periodic(impl):
    mod = kernels.backends()[impl]
    rng = np.random.default_rng(1)
    img = rng.standard_normal((6, 7, 5))
    p = rng.uniform(0, 5, (3, 10))
    shift = np.array([6.0, -7.0, 10.0])[:, None]
    a = at(img, p, 3, wrap=True, impl=mod)
    b = at(img, p + shift, 3, wrap=True, impl=mod)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
@pytest.mark.parametrize("d", [2, 3])
def test_gradient_matches_finite_differences(impl, d):
    mod = kernels.backends()[impl]
    rng = np.random.default_rng(d)
    img = rng.standard_normal((7,) * d)
    # keep away from cell faces where the piecewise-linear map has kinks
    p = np.floor(rng.uniform(0.5, 5.5, (d, 20))) + rng.uniform(0.2, 0.8, (d, 20))
    _, g = at(img, p, d, grad=True, impl=mod)
    h = 1e-6
    for a in range(d):
        e = np.zeros((d, 1))
        e[a] = h
        fd = (at(img, p + e, d, impl=mod) - at(img, p - e, d, impl=mod)) / (2 * h)
        np.testing.assert_allclose(g[a], fd, atol=1e-7)


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled kernels not built")
@pytest.mark.parametrize("d", [2, 3])
def test_backends_agree(d):
    rng = np.random.default_rng(5)
    img = rng.standard_normal((3,) + (8,) * d)
    pos = rng.uniform(-2, 10, (3, d) + (6,) * d)
    for wrap in (False, True):
        a = kernels.sample(img, pos, d, wrap=wrap, grad=True, impl=_pykernels)
        b = kernels.sample(img, pos, d, wrap=wrap, grad=True, impl=kernels.backends()["cython"])
        np.testing.assert_allclose(a[0], b[0], atol=1e-13)
        np.testing.assert_allclose(a[1], b[1], atol=1e-13)


def test_batch_broadcasting():
    rng = np.random.default_rng(6)
    img = rng.standard_normal((8, 8))
    pos = rng.uniform(0, 7, (4, 3, 2, 5, 5))
    out = kernels.sample(img, pos, 2)
    assert out.shape == (4, 3, 5, 5)
    np.testing.assert_allclose(out[2, 1], kernels.sample(img, pos[2, 1], 2))
    with pytest.raises(ValueError):
        kernels.sample(img, rng.uniform(0, 7, (3, 5, 5)), 2)
