import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debulk.scanprep import HeightMap, OrganizedPointCloud, build_heightmap, denoise, median_filter
from debulk.surface import GridSurface

from conftest import flat_ref, plane_cloud


def brute_force_outliers(cloud, k):
    pts = cloud.points[cloud.valid]
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    d.sort(axis=1)
    m = d[:, 1 : k + 1].mean(axis=1)
    drop = m > m.mean() + m.std()
    rows, cols = np.nonzero(cloud.valid)
    return set(zip(rows[drop], cols[drop]))


def removed_set(before, after):
    r, c = np.nonzero(before.valid & ~after.valid)
    return set(zip(r, c))


def test_denoise_clean_plane_drops_only_corners():
    # corner points see neighbors at 1, 1, sqrt(2), 2 pitches; everyone else at 1
    c = plane_cloud()
    out, removed = denoise(c, k=4, return_removed=True)
    assert removed == 4
    assert removed_set(c, out) == {(0, 0), (0, 9), (9, 0), (9, 9)}


def test_denoise_drops_single_spike():
    c = plane_cloud()
    c.points[4, 6, 2] = 50.0
    out, removed = denoise(c, k=4, return_removed=True)
    assert removed == 1
    assert not out.valid[4, 6]


def test_denoise_matches_brute_force(rng):
    c = plane_cloud(12, 9)
    c.points[..., 2] += rng.normal(0, 0.05, c.points.shape[:2])
    hit = rng.random(c.points.shape[:2]) < 0.05
    c.points[..., 2] += np.where(hit, 20.0, 0.0)
    c.valid[0, 3] = False
    for k in (1, 4, 8):
        assert removed_set(c, denoise(c, k=k)) == brute_force_outliers(c, k)


def test_denoise_second_pass_quiet_means_fixed_point():
    # unit-pitch row with k=1: every nearest neighbor is 1 away, so std = 0
    c = plane_cloud(3, 1)
    out = denoise(c, k=1)
    again, removed = denoise(out, k=1, return_removed=True)
    assert removed == 0
    assert np.array_equal(out.valid, again.valid)


def test_denoise_rejects_too_few_points():
    with pytest.raises(ValueError):
        denoise(plane_cloud(2, 2), k=4)
    with pytest.raises(ValueError):
        denoise(plane_cloud(), k=0)


def test_median_identity_and_constant():
    c = plane_cloud(5, 5, z=2.5)
    assert np.array_equal(median_filter(c, 1).points, c.points)
    assert np.array_equal(median_filter(c, 3).points, c.points)


def test_median_removes_spike():
    c = plane_cloud(9, 9)
    c.points[4, 4, 2] = 10.0
    out = median_filter(c, 3)
    assert out.points[4, 4, 2] == 0.0


def test_median_rejects_even_window():
    with pytest.raises(ValueError):
        median_filter(plane_cloud(), 4)


def test_median_keeps_invalid_pixels_invalid():
    c = plane_cloud(7, 7)
    c.valid[3, 3] = False
    assert not median_filter(c, 5).valid[3, 3]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=49, max_size=49), st.sampled_from([1, 3, 5]))
def test_median_stays_within_window_range(zs, window):
    c = plane_cloud(7, 7)
    c.points[..., 2] = np.reshape(zs, (7, 7))
    out = median_filter(c, window).points[..., 2]
    r = window // 2
    z = c.points[..., 2]
    for j in range(7):
        for i in range(7):
            win = z[max(0, j - r) : j + r + 1, max(0, i - r) : i + r + 1]
            assert win.min() - 1e-12 <= out[j, i] <= win.max() + 1e-12


def test_heightmap_self_difference_and_offset():
    ref = flat_ref((0, 20), (0, 20))
    hm = build_heightmap(plane_cloud(21, 21), ref)
    assert hm.mask.all() and np.allclose(hm.values, 0.0)
    hm3 = build_heightmap(plane_cloud(21, 21, z=3.0), ref)
    assert np.allclose(hm3.values[hm3.mask], 3.0)


def test_heightmap_gaussian_peak():
    X, Y = np.meshgrid(np.arange(-60.0, 61.0), np.arange(-60.0, 61.0))
    z = 5.0 * np.exp(-(X**2 + Y**2) / (2 * 20.0**2))
    hm = build_heightmap(OrganizedPointCloud(np.stack([X, Y, z], axis=2)), flat_ref((-60, 60), (-60, 60)))
    assert abs(np.nanmax(hm.values) - 5.0) < 0.1


def test_heightmap_reconstructs_ply():
    ref = GridSurface.from_function(lambda X, Y: 0.01 * X - 0.02 * Y, (0, 30), (0, 30), 1.0)
    X, Y = np.meshgrid(np.arange(31.0), np.arange(31.0))
    z = ref.evaluate(X, Y) + np.sin(X / 5.0)
    hm = build_heightmap(OrganizedPointCloud(np.stack([X, Y, z], axis=2)), ref)
    Xc, Yc = hm.cell_centers()
    back = hm.values + ref.evaluate(Xc, Yc)
    assert np.allclose(back[hm.mask], (ref.evaluate(Xc, Yc) + np.sin(Xc / 5.0))[hm.mask], atol=1e-9)


def test_heightmap_masks_unsupported_cells():
    c = plane_cloud(21, 21)
    c.valid[5:15, 5:15] = False
    hm = build_heightmap(c, flat_ref((0, 20), (0, 20)))
    assert not hm.mask[10, 10]
    assert hm.mask[0, 0]


def test_heightmap_needs_overlap():
    with pytest.raises(ValueError):
        build_heightmap(plane_cloud(), flat_ref((100, 120), (100, 120)))


def test_heightmap_invariants():
    with pytest.raises(ValueError):
        HeightMap((0, 0), (0, 1), np.zeros((2, 2)), np.ones((2, 2), bool))
