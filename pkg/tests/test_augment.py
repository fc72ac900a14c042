import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ufm.augment import (AugmentConfig, AugmentError, GtMatrix, PatchGrid, _draw_mask, augment_pair, build_gt_matrix,
                         center_to_patch, gt_agreement, mask_bounds, oracle_gt_matrix, patch_center, with_chains)
from ufm.geometry import TransformChain
from ufm.seeding import rng_for
from ufm.synthdata import DataFormatError, gen_pair


def _pair(size=32, seed=0):
    return gen_pair(seed, "same-modal", ("OPT",), max(size, 32))


def _identity(size=32):
    return TransformChain([], (size, size)).then("crop", 0, 0, size, size)


def test_patch_center_hand_values():
    assert patch_center(0, 0, 8) == (4, 4)
    assert patch_center(1, 2, 8) == (12, 20)
    assert patch_center(3, 3, 2) == (7, 7)
    with pytest.raises(ValueError):
        patch_center(4, 0, 8, PatchGrid(32, 32, 8))


def test_center_to_patch_hand_values():
    assert center_to_patch(12, 20, 8) == (1, 2)
    assert center_to_patch(4, 4, 8) == (0, 0)
    assert center_to_patch(15, 15, 8) == (2, 2)  # the +1 pushes pixel 15 into the next patch
    assert center_to_patch(15, 15, 8, plus_one=False) == (1, 1)


def test_patch_grid_indexing():
    g = PatchGrid(32, 48, 8)
    assert g.N == 24 and g.index(2, 3) == 3 * 6 + 2
    assert tuple(int(v) for v in g.coords(20)) == (2, 3)
    with pytest.raises(ValueError):
        PatchGrid(30, 32, 8)


def test_mask_bounds_hand_values():
    assert mask_bounds(16) == (4, 6)
    assert mask_bounds(64) == (math.ceil(12.8), math.floor(25.6))


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([16, 25, 64, 100]))
def test_mask_cardinality_property(seed, N):
    lo, hi = mask_bounds(N)
    m = _draw_mask(rng_for(seed), N)
    assert lo <= len(m) <= hi and len(set(m.tolist())) == len(m)


def test_disabled_augmentation_on_registered_pair():
    cfg = AugmentConfig.disabled(crop_h=32, crop_w=32, mask=True)
    ap = augment_pair(_pair(32), cfg, seed=3)
    assert ap.I_a.tobytes() != b"" and len(ap.chain_a) == 1 and ap.chain_a.steps[0].name == "crop"
    lo, hi = mask_bounds(16)
    assert lo <= len(ap.mask_a) <= hi and lo <= len(ap.mask_b) <= hi
    nm = augment_pair(_pair(32), AugmentConfig.disabled(crop_h=32, crop_w=32, mask=False), seed=3)
    np.testing.assert_array_equal(nm.I_a, nm.I_b)


def test_augment_is_deterministic():
    a = augment_pair(_pair(96), AugmentConfig(rotate_deg=15), seed=11)
    b = augment_pair(_pair(96), AugmentConfig(rotate_deg=15), seed=11)
    np.testing.assert_array_equal(a.I_a, b.I_a)
    np.testing.assert_array_equal(a.I_b, b.I_b)
    assert a.chain_a.serialize() == b.chain_a.serialize()
    assert build_gt_matrix(a).serialize() == build_gt_matrix(b).serialize()


def test_noise_amplitude_is_bounded():
    with pytest.raises(ValueError):
        AugmentConfig(noise=17)
    cfg = AugmentConfig.disabled(crop_h=32, crop_w=32, mask=False, noise=5.0)
    p = _pair(32)
    ap = augment_pair(p, cfg, seed=2)
    d = ap.I_a.astype(int) - p.image_a[:32, :32].astype(int)
    assert np.abs(d).max() <= 5 and np.abs(d).max() > 0


def test_overlap_failure_raises():
    cfg = AugmentConfig(crop_h=32, crop_w=32, min_overlap=1.01, max_retries=3)
    with pytest.raises(AugmentError):
        augment_pair(_pair(96), cfg, seed=0)


def test_identity_gt_and_mask_row():
    grid = PatchGrid(32, 32, 8)
    ap = with_chains(_pair(32), _identity(), _identity(), grid)
    np.testing.assert_array_equal(build_gt_matrix(ap).matrix, np.eye(16))
    np.testing.assert_array_equal(oracle_gt_matrix(ap).matrix, np.eye(16))
    ap9 = with_chains(_pair(32), _identity(), _identity(), grid, mask_a=[9])
    gt = build_gt_matrix(ap9).matrix
    assert gt[9].sum() == 0 and all(gt[i, i] == 1 for i in range(16) if i != 9)


def test_mirror_gt_matches_pixel_oracle():
    grid = PatchGrid(32, 32, 8)
    ap = with_chains(_pair(32), _identity(), TransformChain([], (32, 32)).then("mirror-h", 32), grid)
    gt = build_gt_matrix(ap).matrix
    for j in range(4):
        for i in range(4):
            assert gt[j * 4 + i, j * 4 + (3 - i)] == 1
    np.testing.assert_array_equal(oracle_gt_matrix(ap).matrix, gt)


def test_translation_by_one_patch():
    grid = PatchGrid(32, 32, 8)
    ca = TransformChain([], (48, 48)).then("crop", 8, 0, 32, 32)
    cb = TransformChain([], (48, 48)).then("crop", 0, 0, 32, 32)
    p = gen_pair(0, "same-modal", ("OPT",), 48)
    ap = with_chains(p, ca, cb, grid)
    ref = np.zeros((16, 16))
    for j in range(4):
        for i in range(3):
            ref[j * 4 + i, j * 4 + i + 1] = 1
    np.testing.assert_array_equal(build_gt_matrix(ap).matrix, ref)
    np.testing.assert_array_equal(oracle_gt_matrix(ap).matrix, ref)


@given(st.integers(0, 10_000))
def test_gt_invariants(seed):
    ap = augment_pair(gen_pair(seed % 50, "same-modal", ("OPT",), 96), AugmentConfig(rotate_deg=20), seed)
    gt = build_gt_matrix(ap)
    assert set(gt.matrix.sum(1).tolist()) <= {0, 1}
    i, j = np.nonzero(gt.matrix)
    assert not np.isin(i, ap.mask_a).any() and not np.isin(j, ap.mask_b).any()


def test_gt_is_invariant_to_noise():
    p = gen_pair(1, "same-modal", ("OPT",), 96)
    a = augment_pair(p, AugmentConfig(noise=0.0), 5)
    b = augment_pair(p, AugmentConfig(noise=16.0), 5)
    np.testing.assert_array_equal(build_gt_matrix(a).matrix, build_gt_matrix(b).matrix)


def test_gt_file_round_trip_and_errors(tmp_path):
    ap = augment_pair(gen_pair(2, "same-modal", ("OPT",), 96), AugmentConfig(), 8)
    gt = build_gt_matrix(ap)
    text = gt.serialize()
    lines = text.splitlines()
    assert lines[0] == "# ufm-gt v1" and lines[1] == "64 64 64 8"
    assert lines[2].startswith("A: ") and lines[3].startswith("B: ")
    back = GtMatrix.parse(text)
    np.testing.assert_array_equal(back.matrix, gt.matrix)
    assert back.serialize() == text
    with pytest.raises(DataFormatError):
        GtMatrix.parse("garbage\n")


def test_oracle_agreement_on_two_view_and_homography():
    for mode in ("two-view", "homography"):
        ap = augment_pair(gen_pair(4, mode, ("OPT",), 96), AugmentConfig(rotate_deg=10), 1)
        g = gt_agreement(ap)
        assert len(g["disagree"]) / g["rows"] <= 0.1
