import numpy as np
import pytest
from scipy.integrate import quad

from debulk.synth import Pocket, SceneSpec, debulked_cloud, graded_scene_spec, generate, radius_for_level_area


def test_same_seed_same_scene():
    spec = SceneSpec(width=50, height=40, pockets=[Pocket((25, 20), (10, 8), 3.0)], noise_sigma=0.05, outlier_fraction=0.01)
    a, b = generate(spec, 7), generate(spec, 7)
    assert np.array_equal(a.ply.points, b.ply.points)
    assert not np.array_equal(a.ply.points, generate(spec, 8).ply.points)


def test_clean_scene_is_mold_plus_bump():
    p = Pocket((30, 30), (12, 12), 4.0)
    spec = SceneSpec(width=61, height=61, pockets=[p], mold="doubly", mold_radius=500.0, mold_radius2=800.0)
    sc = generate(spec)
    X, Y = np.meshgrid(spec.xs, spec.ys)
    assert np.allclose(sc.ply.points[..., 2], spec.mold_height(X, Y) + p.height(X, Y))
    assert np.allclose(sc.ref.values, spec.mold_height(X, Y))
    assert sc.ply.points[30, 30, 2] - sc.ref.values[30, 30] == pytest.approx(4.0)


def test_level_area_analytic():
    p = Pocket((0, 0), (30, 20), 5.0)
    X, Y = np.meshgrid(np.arange(-40, 40, 0.1), np.arange(-30, 30, 0.1))
    numeric = (p.height(X, Y) > 2.0).sum() * 0.01
    assert p.level_area(2.0) == pytest.approx(numeric, rel=0.01)
    assert Pocket((0, 0), (5, 5), 1.5).level_area(2.0) == 0.0


def test_excess_length_matches_quadrature():
    p = Pocket((0, 0), (20, 20), 4.0)

    def integrand(x):
        dz = -p.peak * np.pi / (2 * 20) * np.sin(np.pi * abs(x) / 20)
        return np.sqrt(1 + dz**2)

    arc = quad(integrand, -20, 20)[0]
    assert p.excess_length(0) == pytest.approx(arc - 40.0, rel=1e-6)


def test_dimple_mirrors_mold_and_has_no_excess():
    p = Pocket((50, 50), (20, 20), 4.0, dimple=True)
    spec = SceneSpec(width=101, height=101, pockets=[p])
    sc = generate(spec)
    z_ply = sc.ply.points[..., 2]
    assert np.allclose(z_ply, -sc.ref.values)
    assert z_ply[50, 50] - sc.ref.values[50, 50] == pytest.approx(4.0)
    assert sc.truth[0].excess == (0.0, 0.0)


def test_overlapping_pockets_merge_in_truth():
    spec = SceneSpec(width=100, height=60, pockets=[Pocket((30, 30), (15, 15), 4.0), Pocket((50, 30), (15, 15), 4.0)])
    (t,) = generate(spec).truth
    assert t.members == [0, 1]
    assert np.isnan(t.excess[0])


def test_noise_and_outliers():
    spec = SceneSpec(width=100, height=100, noise_sigma=0.1, outlier_fraction=0.02)
    z = generate(spec, 3).ply.points[..., 2]
    out = np.abs(z) > 4.0
    assert 0.01 < out.mean() < 0.03
    assert np.std(z[~out]) == pytest.approx(0.1, rel=0.1)


def test_spec_round_trip(tmp_path):
    spec = SceneSpec(width=30, height=30, pockets=[Pocket((15, 15), (5, 6), 3.0, dimple=True)], mold="cylinder")
    spec.save(tmp_path / "s.json")
    back = SceneSpec.load(tmp_path / "s.json")
    assert back == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(mold="sphere")
    with pytest.raises(ValueError):
        SceneSpec(width=10, height=10, pockets=[Pocket((50, 50), (5, 5), 3.0)])
    with pytest.raises(ValueError):
        Pocket((0, 0), (5, 5), -1.0)


def test_debulked_cloud_offset():
    spec = SceneSpec(width=20, height=20, mold="cylinder", mold_radius=100.0)
    c = debulked_cloud(spec, thickness=0.25)
    X, Y = np.meshgrid(spec.xs, spec.ys)
    assert np.allclose(c.points[..., 2], spec.mold_height(X, Y) + 0.25)


def test_graded_layout():
    spec = graded_scene_spec()
    sc = generate(spec)
    areas = [t.level_area(spec, 2.0) for t in sc.truth]
    assert len(sc.truth) == 14
    assert max(areas) == pytest.approx(438.0, rel=1e-6)
    assert min(areas) == pytest.approx(5.35, rel=1e-6)


def test_radius_for_level_area():
    rx, ry = radius_for_level_area(100.0, 6.0)
    assert Pocket((0, 0), (rx, ry), 6.0).level_area(2.0) == pytest.approx(1e4)
