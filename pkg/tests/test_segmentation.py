import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from debulk.scanprep import HeightMap, build_heightmap
from debulk.segmentation import (
    AirPocketPatch,
    SegmentationSettings,
    fill_holes,
    load_patches,
    save_patches,
    segment,
    threshold_cut,
    trace_boundaries,
)
from debulk.synth import Pocket, SceneSpec, graded_scene_spec, generate


def _hm(values, mask=None):
    v = np.asarray(values, dtype=float)
    return HeightMap((0.0, 0.0), (1.0, 1.0), v, np.ones(v.shape, bool) if mask is None else mask)


def _signed_area(loop):
    # loop is (row, col); XY has x = col, y = row
    x, y = loop[:, 1].astype(float), loop[:, 0].astype(float)
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def test_threshold_cut_is_strict_and_ignores_masked():
    v = np.array([[1.0, 2.0, 3.0]])
    m = np.array([[True, True, False]])
    assert threshold_cut(_hm(v, m), 1.5).tolist() == [[False, True, False]]
    with pytest.raises(ValueError):
        threshold_cut(_hm(v), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=36, max_size=36), st.floats(0.1, 5), st.floats(0, 5))
def test_threshold_cut_monotone(vals, cut, extra):
    hm = _hm(np.reshape(vals, (6, 6)))
    low, high = threshold_cut(hm, cut), threshold_cut(hm, cut + extra)
    assert not np.any(high & ~low)


def test_fill_holes_annuli():
    m = np.zeros((12, 24), bool)
    for c0 in (1, 13):
        m[1:10, c0 : c0 + 9] = True
        m[4:7, c0 + 3 : c0 + 6] = False
    f = fill_holes(m)
    assert f[5, 5] and f[5, 17]
    assert len(trace_boundaries(f)) == 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=64, max_size=64))
def test_fill_holes_idempotent_and_additive(bits):
    m = np.reshape(bits, (8, 8))
    f = fill_holes(m)
    assert np.all(f[m])
    assert np.array_equal(fill_holes(f), f)


def test_trace_single_pixel_and_square():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    (b,) = trace_boundaries(m)
    assert len(b.loop) == 1
    m[1:4, 1:4] = True
    (b,) = trace_boundaries(m)
    assert len(b.loop) == 8
    assert {tuple(p) for p in b.loop} == {(r, c) for r in range(1, 4) for c in range(1, 4)} - {(2, 2)}
    assert _signed_area(b.loop) > 0


def test_trace_two_squares():
    m = np.zeros((6, 10), bool)
    m[1:4, 1:4] = True
    m[1:4, 6:9] = True
    bs = trace_boundaries(m)
    assert len(bs) == 2
    assert sum(len(b.pixels) for b in bs) == m.sum()


def test_trace_diagonal_component_is_one():
    m = np.eye(5, dtype=bool)
    (b,) = trace_boundaries(m)
    assert len(b.pixels) == 5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=49, max_size=49))
def test_boundaries_ccw_and_cover_components(bits):
    m = fill_holes(np.reshape(bits, (7, 7)))
    bs = trace_boundaries(m)
    covered = np.zeros_like(m)
    for b in bs:
        assert not covered[b.pixels[:, 0], b.pixels[:, 1]].any()
        covered[b.pixels[:, 0], b.pixels[:, 1]] = True
        assert m[b.loop[:, 0], b.loop[:, 1]].all()
        if len(b.loop) >= 3 and abs(_signed_area(b.loop)) > 0:
            assert _signed_area(b.loop) > 0
    assert np.array_equal(covered, m)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.booleans(), min_size=56, max_size=56))
def test_mirror_symmetry(bits):
    m = fill_holes(np.reshape(bits, (7, 8)))
    a = trace_boundaries(m)
    b = trace_boundaries(m[:, ::-1])
    ncol = m.shape[1]
    pa = sorted(sorted(map(tuple, x.pixels.tolist())) for x in a)
    pb = sorted(sorted((r, ncol - 1 - c) for r, c in x.pixels.tolist()) for x in b)
    assert pa == pb
    la = sorted(frozenset(map(tuple, x.loop.tolist())) for x in a)
    lb = sorted(frozenset((r, ncol - 1 - c) for r, c in x.loop.tolist()) for x in b)
    assert sorted(map(sorted, la)) == sorted(map(sorted, lb))


def _scene(pockets, size=201):
    spec = SceneSpec(width=size, height=size, pockets=pockets)
    sc = generate(spec)
    return build_heightmap(sc.ply, sc.ref), sc


def test_low_peak_rejected():
    hm, sc = _scene([Pocket((100, 100), (40, 40), 1.0)])
    assert segment(hm, sc.ref) == []


def test_area_tolerance_boundary():
    hm, sc = _scene([Pocket((100, 100), (20.0, 20.0), 4.0)])
    (p,) = segment(hm, sc.ref)
    assert segment(hm, sc.ref, SegmentationSettings(area_tol=p.area + 0.01)) == []
    assert len(segment(hm, sc.ref, SegmentationSettings(area_tol=p.area))) == 1


def test_patches_sorted_numbered_disjoint():
    hm, sc = _scene([Pocket((50, 50), (20, 20), 5.0), Pocket((140, 140), (40, 40), 5.0), Pocket((150, 50), (30, 30), 5.0)])
    ps = segment(hm, sc.ref)
    assert [p.id for p in ps] == [1, 2, 3]
    assert [p.area for p in ps] == sorted((p.area for p in ps), reverse=True)
    for i in range(3):
        for j in range(i + 1, 3):
            assert ps[i].region.intersection(ps[j].region).area == 0
    for p in ps:
        assert p.ply_surface.shape == p.ref_surface.shape
        assert p.region.within(Polygon(p.ply_outline))


def test_margin_clipped_and_flagged():
    hm, sc = _scene([Pocket((30, 100), (25, 25), 5.0)])
    (p,) = segment(hm, sc.ref, margin=50.0)
    assert p.margin_clipped
    assert p.near_ply_boundary


def test_default_margin_covers_lifted_ply():
    hm, sc = _scene([Pocket((100, 100), (40, 40), 8.0)])
    (p,) = segment(hm, sc.ref, target_nodes=400)
    x0, x1, y0, y1 = p.ply_surface.bounds
    # ply stands 1 mm off the mold out to rho = 2/pi * arccos(sqrt(1/8))
    r1 = 40.0 * 2.0 / np.pi * np.arccos(np.sqrt(1.0 / 8.0))
    delta = np.sqrt(p.area * 100.0 / 400)
    assert x0 <= 100 - r1 - delta and x1 >= 100 + r1 + delta
    assert y0 <= 100 - r1 - delta and y1 >= 100 + r1 + delta


def test_low_confidence_flag():
    hm, sc = _scene([Pocket((100, 100), (40, 40), 6.0)])
    (p,) = segment(hm, sc.ref)
    assert p.meta["low_confidence"] is False
    mask = hm.mask.copy()
    rows, cols = p.pixels[:, 0], p.pixels[:, 1]
    mask[rows[0] - 1, cols[0]] = False
    (q,) = segment(HeightMap(hm.origin, hm.spacing, hm.values, mask), sc.ref)
    assert q.meta["low_confidence"] is True


def test_graded_layout_sizes():
    spec = graded_scene_spec()
    sc = generate(spec)
    ps = segment(build_heightmap(sc.ply, sc.ref), sc.ref)
    assert len(ps) == 14
    assert ps[0].area == pytest.approx(438.0, rel=0.05)
    assert ps[-1].area == pytest.approx(5.35, rel=0.05)


def test_patch_round_trip(tmp_path):
    hm, sc = _scene([Pocket((100, 100), (30, 30), 5.0)])
    ps = segment(hm, sc.ref)
    save_patches(tmp_path / "p.json", ps)
    (b,) = load_patches(tmp_path / "p.json")
    assert isinstance(b, AirPocketPatch)
    assert b.area == ps[0].area and b.peak == ps[0].peak
    assert np.array_equal(b.pixels, ps[0].pixels)
    assert np.array_equal(b.ply_surface.values, ps[0].ply_surface.values)
    assert b.region.equals(ps[0].region)


def test_settings_validation():
    with pytest.raises(ValueError):
        SegmentationSettings(area_tol=0.0)
