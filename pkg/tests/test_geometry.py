import numpy as np
import pytest
from hypothesis import given, strategies as st

from ufm.geometry import (OUT_OF_FRAME, GeometryError, TransformChain, apply_homography, apply_homography_many,
                          chain_map, corner_error, epipolar_distance, estimate_homography_ransac,
                          fundamental_from_poses, normalize_h)


def _random_h(rng):
    H = np.eye(3) + rng.normal(scale=[[0.1, 0.1, 5], [0.1, 0.1, 5], [1e-3, 1e-3, 0]], size=(3, 3))
    return normalize_h(H)


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_identity_and_translation():
    assert apply_homography(np.eye(3), (7, 3)) == (7, 3)
    T = np.array([[1, 0, 2], [0, 1, -1], [0, 0, 1]], float)
    assert apply_homography(T, (0, 0)) == (2, -1)


def test_homography_round_trip(rng):
    for _ in range(10):
        H = _random_h(rng)
        p = rng.uniform(0, 96, size=(100, 2))
        back = apply_homography_many(np.linalg.inv(H), apply_homography_many(H, p))
        assert np.abs(back - p).max() < 1e-6


def test_point_at_infinity_is_an_error():
    H = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], float)
    with pytest.raises(GeometryError):
        apply_homography(H, (0, 5))


def test_mirror_and_rot90_hand_values():
    assert chain_map(TransformChain([], (32, 32)).then("mirror-h", 32), (0, 5)) == (31, 5)
    assert chain_map(TransformChain([], (32, 32)).then("rot90", 1, 32, 32), (0, 0)) == (31, 0)
    assert chain_map(TransformChain(), (3.5, -2.0)) == (3.5, -2.0)


def test_out_of_frame_is_a_value():
    ch = TransformChain([], (32, 32)).then("crop", 8, 8, 16, 16)
    assert ch.map((2, 2)) is OUT_OF_FRAME
    assert ch.map((10, 12)) == (2, 4)


STEP = st.one_of(
    st.tuples(st.just("mirror-h")), st.tuples(st.just("mirror-v")),
    st.tuples(st.just("rot90"), st.integers(0, 3)),
    st.tuples(st.just("rotate"), st.floats(-180, 180)),
    st.tuples(st.just("crop"), st.integers(0, 8), st.integers(0, 8)),
    st.tuples(st.just("scale"), st.floats(0.5, 2.0)))


def _build(steps, w=48, h=40):
    ch = TransformChain([], (w, h))
    for s in steps:
        if s[0] == "mirror-h":
            ch = ch.then("mirror-h", w)
        elif s[0] == "mirror-v":
            ch = ch.then("mirror-v", h)
        elif s[0] == "rot90":
            ch = ch.then("rot90", s[1], w, h)
            if s[1] % 2:
                w, h = h, w
        elif s[0] == "rotate":
            ch = ch.then("rotate", s[1], w, h)
        elif s[0] == "crop":
            ch = ch.then("crop", s[1], s[2], w - 8, h - 8)
            w, h = w - 8, h - 8
        else:
            ch = ch.then("scale", s[1])
            w, h = int(round(w * s[1])), int(round(h * s[1]))
    return ch


@given(st.lists(STEP, max_size=4), st.floats(0, 47), st.floats(0, 39))
def test_chain_round_trip_and_serialization(steps, x, y):
    ch = _build(steps)
    p = np.array([[x, y]])
    fwd = ch.map_points(p)
    if not np.isnan(fwd).any():  # OutOfFrame points have no inverse image to check
        assert np.abs(ch.map_points(fwd, "inverse") - p).max() < 1e-9
    again = TransformChain.parse(ch.serialize())
    assert again.serialize() == ch.serialize()
    np.testing.assert_array_equal(again.matrix(), ch.matrix())


@given(st.lists(STEP, max_size=2), st.lists(STEP, max_size=2), st.lists(STEP, max_size=2))
def test_composition_is_associative(a, b, c):
    A, B, C = (TransformChain(_build(s).steps) for s in (a, b, c))
    left, right = A.compose(B).compose(C), A.compose(B.compose(C))
    np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-12)


def test_serialization_line_format():
    ch = TransformChain([], (32, 32)).then("crop", 4, 4, 32, 32)
    assert ch.serialize().splitlines()[-1] == "crop 4 4 32 32"


def test_fundamental_pure_x_translation():
    F = fundamental_from_poses(np.eye(3), np.eye(3), np.eye(3), [1.0, 0, 0])
    ref = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], float)
    ref /= np.linalg.norm(ref)
    assert np.allclose(F, ref) or np.allclose(F, -ref)
    # horizontal epipolar lines: the line through (5, 3) is y = 3
    assert epipolar_distance(F, (5, 3), (40, 3)) < 1e-12
    assert abs(epipolar_distance(F, (5, 3), (40, 5)) - 2) < 1e-12


def test_fundamental_projection_oracle(rng):
    worst = 0.0
    for _ in range(50):
        K1 = np.array([[80, 0, 48], [0, 80, 48], [0, 0, 1.0]])
        K2 = np.array([[90, 0, 40], [0, 85, 50], [0, 0, 1.0]])
        R, t = _rotation(rng), rng.normal(size=3)
        F = fundamental_from_poses(K1, K2, R, t)
        assert np.linalg.svd(F, compute_uv=False)[2] / np.linalg.svd(F, compute_uv=False)[0] < 1e-6
        X = rng.normal(size=(20, 3)) + [0, 0, 6]
        x1 = X @ K1.T
        x2 = (X @ R.T + t) @ K2.T
        x1, x2 = x1 / x1[:, 2:], x2 / x2[:, 2:]
        worst = max(worst, np.abs(np.einsum("ij,jk,ik->i", x2, F, x1)).max())
    assert worst < 1e-6


def test_fundamental_degenerate_inputs():
    with pytest.raises(GeometryError):
        fundamental_from_poses(np.eye(3), np.eye(3), np.eye(3), [0, 0, 0])
    with pytest.raises(GeometryError):
        fundamental_from_poses(np.eye(3), np.eye(3), 2 * np.eye(3), [1, 0, 0])


def test_epipolar_distance_hand_values():
    F = np.zeros((3, 3))
    F[1, 2] = 1.0  # line (0, 1, 0) for every p1, i.e. y = 0
    assert epipolar_distance(F, (1, 1), (5, 3)) == pytest.approx(3.0)
    with pytest.raises(GeometryError):
        epipolar_distance(np.zeros((3, 3)), (1, 1), (0, 0))


def test_ransac_exact_and_with_outliers(rng):
    H = _random_h(rng)
    src = rng.uniform(0, 96, size=(20, 2))
    dst = apply_homography_many(H, src)
    Hest, inl = estimate_homography_ransac(src, dst, seed=0)
    assert corner_error(Hest, H, 96, 96) < 1e-4 and inl.all()
    src2 = np.r_[src, rng.uniform(0, 96, size=(20, 2))]
    dst2 = np.r_[dst, rng.uniform(0, 96, size=(20, 2))]
    Hest2, _ = estimate_homography_ransac(src2, dst2, inlier_thresh=1.0, seed=0)
    assert corner_error(Hest2, H, 96, 96) < 0.1
    H3, m3 = estimate_homography_ransac(src2, dst2, inlier_thresh=1.0, seed=0)
    np.testing.assert_array_equal(H3, Hest2)
    np.testing.assert_array_equal(m3, _)


def test_ransac_needs_four_matches(rng):
    with pytest.raises(GeometryError):
        estimate_homography_ransac(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_ransac_rejects_collinear_samples():
    src = np.c_[np.arange(8.0), np.arange(8.0)]
    with pytest.raises(GeometryError):
        estimate_homography_ransac(src, src + 1, iters=50)
