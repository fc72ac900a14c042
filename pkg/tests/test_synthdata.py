import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from ufm.geometry import epipolar_distance, fundamental_from_poses
from ufm.synthdata import (DataFormatError, Modality, Registered, gen_base_scene, gen_dataset, gen_pair, load_manifest,
                           pair_key, parse_geometry, read_pgm, render_modality, write_pgm)

MODS = [m.value for m in Modality]


def _orientation_corr(a, b, sigma=1.5):
    """Magnitude-weighted mean of cos(2 * angle difference) at structure scale.

    Sign-free so inverted contrast still counts; smoothing first so speckle does not dominate.
    """
    a, b = (ndimage.gaussian_filter(x.astype(float), sigma) for x in (a, b))
    ga = np.stack([ndimage.sobel(a, 1), ndimage.sobel(a, 0)])
    gb = np.stack([ndimage.sobel(b, 1), ndimage.sobel(b, 0)])
    ta, tb = np.arctan2(ga[1], ga[0]), np.arctan2(gb[1], gb[0])
    w = np.hypot(*ga) * np.hypot(*gb)
    return float((w * np.cos(2 * (ta - tb))).sum() / w.sum())


def test_base_scene_deterministic_and_seed_dependent():
    a, b = gen_base_scene(1, 64), gen_base_scene(1, 64)
    assert a.tobytes() == b.tobytes()
    c = gen_base_scene(2, 64)
    assert (np.abs(a.astype(int) - c.astype(int)) > 4).mean() >= 0.10
    assert len(np.unique(gen_base_scene(1, 128))) >= 128
    assert a.dtype == np.uint8
    with pytest.raises(ValueError):
        gen_base_scene(1, 16)


def test_render_modality_examples():
    base = gen_base_scene(3, 64)
    np.testing.assert_array_equal(render_modality(base, "OPT", 0, gamma=1.0), base)
    np.testing.assert_array_equal(render_modality(base, "SAR", 5), render_modality(base, "SAR", 5))
    assert np.abs(render_modality(base, "NIR").astype(float) - base).mean() > 16


@pytest.mark.parametrize("m", MODS)
def test_modalities_keep_edge_structure(m):
    base = gen_base_scene(4, 96)
    assert _orientation_corr(base, render_modality(base, m, 1)) > 0.3


def test_same_and_cross_modal_pairs():
    p = gen_pair(5, "same-modal", ("OPT",), 64)
    assert p.image_a.tobytes() == p.image_b.tobytes() and isinstance(p.geometry, Registered)
    q = gen_pair(5, "cross-modal", ("OPT", "SAR"), 64)
    assert isinstance(q.geometry, Registered) and q.cross_modal
    assert not np.array_equal(q.image_a, q.image_b)
    pts = np.random.default_rng(0).uniform(0, 63, (50, 2))
    np.testing.assert_array_equal(q.geometry.map_points(pts), pts)
    assert _orientation_corr(q.image_a, q.image_b) > 0.3
    with pytest.raises(ValueError):
        gen_pair(1, "cross-modal", ("OPT", "OPT"))
    with pytest.raises(ValueError):
        gen_pair(1, "same-modal", ("OPT", "SAR"))


def test_two_view_epipolar_residuals():
    p = gen_pair(6, "two-view", ("OPT",), 96)
    g = p.geometry
    F = fundamental_from_poses(g.K1, g.K2, g.R, g.t)
    pts = np.random.default_rng(1).uniform(0, 95, (500, 2))
    q = g.map_points(pts)
    ok = np.isfinite(q).all(axis=1)
    assert ok.sum() > 300
    assert np.max(epipolar_distance(F, pts[ok], q[ok])) < 1e-4


@pytest.mark.parametrize("mode,mods", [("same-modal", ("OPT",)), ("cross-modal", ("NIR", "DEPTH")),
                                       ("two-view", ("OPT", "UV")), ("homography", ("OPT", "SAR"))])
def test_ground_truth_consistent_after_serialization(mode, mods):
    p = gen_pair(7, mode, mods, 64)
    g2 = parse_geometry(p.geometry.serialize(), (64, 64))
    pts = np.random.default_rng(2).uniform(0, 63, (1000, 2))
    a, b = p.geometry.map_points(pts), g2.map_points(pts)
    both = np.isfinite(a).all(1) & np.isfinite(b).all(1)
    assert both.mean() > 0.5
    assert np.abs(a[both] - b[both]).max() < 1e-4


def test_pgm_header_and_errors(tmp_path):
    f = tmp_path / "x.pgm"
    f.write_bytes(b"P5\n3 2\n255\n" + bytes(range(6)))
    np.testing.assert_array_equal(read_pgm(f), np.arange(6, dtype=np.uint8).reshape(2, 3))
    write_pgm(tmp_path / "y.pgm", read_pgm(f))
    assert (tmp_path / "y.pgm").read_bytes() == f.read_bytes()
    for bad in (b"P2\n3 2\n255\n" + bytes(6), b"P5\n3 2\n65535\n" + bytes(12), b"P5\n3 2\n255\n" + bytes(4)):
        f.write_bytes(bad)
        with pytest.raises(DataFormatError):
            read_pgm(f)


@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_pgm_round_trip(tmp_path_factory, img):
    f = tmp_path_factory.mktemp("pgm") / "r.pgm"
    write_pgm(f, img)
    np.testing.assert_array_equal(read_pgm(f), img)
    raw = f.read_bytes()
    write_pgm(f, read_pgm(f))
    assert f.read_bytes() == raw


def test_dataset_regeneration_is_bit_identical(tmp_path):
    gen_dataset(3, 6, "opt:opt,opt:sar,nir:nir@tv,opt:depth@h", tmp_path / "a", 48)
    gen_dataset(3, 6, "opt:opt,opt:sar,nir:nir@tv,opt:depth@h", tmp_path / "b", 48)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 1 + 3 * 6
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = load_manifest(tmp_path / "a")
    assert [e.geom_type for e in man.entries] == ["REG", "REG", "F", "H", "REG", "REG"]
    assert man.modality_pairs() == {"OPT", "OPT+SAR", "NIR", "DEPTH+OPT"}


def test_manifest_format_errors(tmp_path):
    (tmp_path / "manifest.txt").write_text("p0 OPT OPT REG a.pgm b.pgm\n")
    with pytest.raises(DataFormatError):
        load_manifest(tmp_path)
    with pytest.raises(DataFormatError):
        load_manifest(tmp_path / "missing")


def test_pair_keys_are_unordered():
    assert pair_key("SAR", "OPT") == pair_key("OPT", "SAR")
    assert pair_key("OPT", "OPT") == "OPT"
    with pytest.raises(ValueError):
        Modality.parse("RGB")
