"""RoI sampling, box embeddings, and the patch encoder stack."""

import numpy as np
import pytest

from affseg.autodiff import ParameterStore, grad_check, sum_, mul
from affseg.encoder import (
    encode_patches,
    init_encoder_params,
    mask_roi,
    patch_descriptors,
    position_embedding,
    roi_align,
)
from affseg.masks import BBox, BinaryMask


def test_roi_align_full_grid_identity():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(6, 6, 3))
    out = roi_align(grid, BBox(0, 0, 6, 6), 6)
    assert np.array_equal(out, grid)


def test_roi_align_linear_ramp_closed_form():
    h = w = 12
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = (2.0 * yy + 3.0 * xx)[:, :, None]  # linear in pixel-center coords
    box = BBox(2, 3, 9, 8)
    s = 5
    out = roi_align(grid, box, s)
    xs = box.x0 + (np.arange(s) + 0.5) * box.width / s
    ys = box.y0 + (np.arange(s) + 0.5) * box.height / s
    expect = 2.0 * (ys[:, None] - 0.5) + 3.0 * (xs[None, :] - 0.5)
    assert np.allclose(out[:, :, 0], expect, atol=1e-12)


def test_mask_roi_zeroes_exactly_off_mask_cells():
    grid = np.ones((20, 20, 3))
    dense = np.zeros((20, 20), dtype=bool)
    dense[2:18, 2:10] = True  # left half of the box below
    mask = BinaryMask.from_dense(dense)
    box = BBox(2, 2, 18, 18)
    out = mask_roi(grid, mask, box, 8)
    # nearest-neighbor lattice: 8 columns over 16 px, centers at x = 3,5,...,17
    on = out[:, :, 0] != 0
    assert on.sum() == 8 * 4  # exactly half the cells survive
    assert np.all(on[:, :4]) and not np.any(on[:, 4:])


def test_position_embedding_shape_and_determinism():
    e1 = position_embedding(BBox(4, 8, 20, 30), 64, 64, 32)
    e2 = position_embedding(BBox(4, 8, 20, 30), 64, 64, 32)
    e3 = position_embedding(BBox(5, 8, 21, 30), 64, 64, 32)
    assert e1.shape == (32,)
    assert np.array_equal(e1, e2)
    assert not np.array_equal(e1, e3)
    assert np.all(np.abs(e1) <= 1.0)
    with pytest.raises(ValueError):
        position_embedding(BBox(0, 0, 2, 2), 64, 64, 30)


def _toy_scene(rng, n_patches=5, size=24):
    image = rng.random((size, size, 3))
    patches = []
    for i in range(n_patches):
        d = np.zeros((size, size), dtype=bool)
        y, x = rng.integers(0, size - 6, 2)
        d[y : y + 5, x : x + 5] = True
        patches.append(BinaryMask.from_dense(d))
    return image, patches


def _make_store(feat_dim, dim, layers, seed=0):
    store = ParameterStore()
    init_encoder_params(store, feat_dim, dim, layers, np.random.default_rng(seed))
    return store


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(1)
    image, patches = _toy_scene(rng)
    s, dim = 4, 16
    feats, pos, _ = patch_descriptors(image, patches, s, dim)
    store = _make_store(s * s * 3, dim, 2)

    out = encode_patches(store, feats, pos, 2, 2).values
    perm = np.array([3, 0, 4, 1, 2])
    out_p = encode_patches(store, feats[perm], pos[perm], 2, 2).values
    assert np.allclose(out_p, out[perm], atol=1e-10)


def test_identical_shapes_differ_only_by_position():
    # two identical squares at different spots: same mask-roi features,
    # different position embeddings
    size = 32
    image = np.full((size, size, 3), 0.5)
    d1 = np.zeros((size, size), dtype=bool)
    d1[2:8, 2:8] = True
    d2 = np.zeros((size, size), dtype=bool)
    d2[20:26, 14:20] = True
    p1, p2 = BinaryMask.from_dense(d1), BinaryMask.from_dense(d2)
    feats, pos, _ = patch_descriptors(image, [p1, p2], 4, 16)
    assert np.array_equal(feats[0], feats[1])
    assert not np.array_equal(pos[0], pos[1])


def test_encoder_gradients_pass_fd():
    rng = np.random.default_rng(2)
    image, patches = _toy_scene(rng, n_patches=3)
    s, dim = 3, 8
    feats, pos, _ = patch_descriptors(image, patches, s, dim)
    store = _make_store(s * s * 3, dim, 1, seed=3)
    tensors = [store[n] for n in store.names()]

    def build():
        out = encode_patches(store, feats, pos, 1, 2)
        return sum_(mul(out, out))

    err = grad_check(build, tensors, max_coords_per_tensor=6, seed=4)
    assert err < 1e-4
