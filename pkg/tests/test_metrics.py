import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hbatlas.geodesic import DeformationField, GridMismatchError, identity_grid
from hbatlas.metrics import (
    LabelMap,
    dice,
    label_atlas,
    mean_dice,
    patch_corners,
    propagate_segmentation,
    sharpness,
)


def test_sharpness_constant_and_scale_invariance():
    rep = sharpness(np.full((20, 20), 3.0), w=3, n_patches=100, seed=0)
    assert rep.scores.shape == (100,) and np.all(rep.scores == 0.0) and rep.n_skipped == 0
    img = np.random.default_rng(0).random((30, 25)) + 0.1
    a = sharpness(img, 5, 200, seed=1)
    b = sharpness(7.5 * img, 5, 200, seed=1)
    np.testing.assert_allclose(a.scores, b.scores, rtol=1e-12)
    assert np.all(a.scores >= 0)


def test_sharpness_patch_definition():
    img = np.zeros((6, 6))
    img[:3, :3] = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
    rep = sharpness(img, w=3, n_patches=500, seed=2)
    corners = patch_corners(img.shape, 3, 500, 2)
    kept = corners[[img[c[0]:c[0] + 3, c[1]:c[1] + 3].mean() != 0 for c in corners]]
    at_origin = np.flatnonzero((kept == 0).all(axis=1))
    assert at_origin.size > 0
    vals = np.arange(1, 10.0)
    np.testing.assert_allclose(rep.scores[at_origin], vals.std() / vals.mean())
    assert np.all(corners <= 3)


def test_sharpness_skips_zero_mean_patches():
    img = np.zeros((10, 10))
    img[:, 5:] = 1.0
    rep = sharpness(img, w=2, n_patches=400, seed=3)
    assert rep.n_skipped > 0
    assert rep.scores.size + rep.n_skipped == 400
    with pytest.raises(ValueError):
        sharpness(img, w=11)
    with pytest.raises(ValueError):
        sharpness(img, w=1)


def test_sharpness_is_translation_covariant():
    rng = np.random.default_rng(4)
    img = rng.random((20, 20)) + 0.5
    big = np.zeros((25, 23)) + 0.7
    big[3:23, 2:22] = img
    a = sharpness(img, 3, 50, seed=5)
    corners = patch_corners(img.shape, 3, 50, 5)
    for c, s in zip(corners, a.scores):
        patch = big[c[0] + 3:c[0] + 6, c[1] + 2:c[1] + 5]
        assert np.isclose(s, patch.std() / patch.mean())


def test_dice_examples():
    a = np.zeros((10, 10), int)
    a[2:6, 2:6] = 1
    assert dice(a, a, 1) == 1.0
    b = np.zeros_like(a)
    b[6:10, 6:10] = 1
    assert dice(a, b, 1) == 0.0
    c = np.zeros_like(a)
    c[2:6, 4:8] = 1
    assert dice(a, c, 1) == 0.5
    assert dice(a, c, 7) == 1.0
    with pytest.raises(GridMismatchError):
        dice(a, a[:5], 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, (8, 9))
    b = rng.integers(0, 3, (8, 9))
    perm = rng.permutation(a.size)
    for lab in range(3):
        d = dice(a, b, lab)
        assert 0.0 <= d <= 1.0
        assert d == dice(b, a, lab)
        assert d == dice(a.ravel()[perm], b.ravel()[perm], lab)


def test_propagation_identity_and_shift():
    seg = np.random.default_rng(6).integers(0, 4, (12, 12))
    lm = LabelMap(seg)
    out = propagate_segmentation(lm, DeformationField(identity_grid((12, 12))))
    assert np.array_equal(out.labels, seg) and out.label_set == lm.label_set
    m = identity_grid((12, 12))
    m[0] += 2.0
    shifted = propagate_segmentation(lm, DeformationField(m))
    assert np.array_equal(shifted.labels[:-2], seg[2:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_propagation_never_invents_labels(seed):
    rng = np.random.default_rng(seed)
    seg = LabelMap(rng.choice([0, 2, 5], size=(10, 10)), label_set=(0, 2, 5, 9))
    m = identity_grid((10, 10)) + rng.normal(0, 3, (2, 10, 10))
    out = propagate_segmentation(seg, DeformationField(m))
    assert set(np.unique(out.labels)) <= {0, 2, 5}


def test_labelmap_validation():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0.5, 1.0]]))
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 3]]), label_set=(0, 1))
    with pytest.raises(GridMismatchError):
        propagate_segmentation(np.zeros((5, 5), int), DeformationField(identity_grid((6, 6))))


def test_label_atlas_and_mean_dice():
    seg = np.zeros((3, 10, 10), int)
    seg[:, 3:7, 3:7] = 1
    seg[0, 0, 0] = 2
    ident = np.broadcast_to(identity_grid((10, 10)), (3, 2, 10, 10))
    atlas = label_atlas(seg, ident)
    assert atlas[0, 0] == 0 and atlas[4, 4] == 1
    scores, m = mean_dice(atlas, seg[1])
    assert scores == {1: 1.0} and m == 1.0
