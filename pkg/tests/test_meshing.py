from types import SimpleNamespace

import numpy as np
import pytest
from shapely.geometry import box

from debulk.meshing import (
    MeshConfig,
    choose_discretization,
    classify_boundary,
    mesh_patch,
    place_nodes,
    seed_fiber_paths,
)
from debulk.net import FIXED, FREE, INTERIOR, PlyNet, lattice_net
from debulk.scanprep import build_heightmap
from debulk.segmentation import segment
from debulk.surface import GridSurface
from debulk.synth import Pocket, SceneSpec, generate


def _patch(pockets, size=201, mold="flat", outline=None, target=100, **kw):
    spec = SceneSpec(width=size, height=size, pockets=pockets, mold=mold, ply_outline=outline, **kw)
    sc = generate(spec)
    poly = None if outline is None else spec.outline()
    return segment(build_heightmap(sc.ply, sc.ref), sc.ref, ply_outline=poly, target_nodes=target)[0]


@pytest.fixture(scope="module")
def bump():
    return _patch([Pocket((100, 100), (40, 40), 6.0)])


def _chords(net):
    return net.edge_lengths()


def test_discretization_rule():
    stub = SimpleNamespace(area=100.0, extent=500.0)
    assert choose_discretization(stub, 100) == pytest.approx(10.0)
    assert choose_discretization(SimpleNamespace(area=438.0, extent=500.0), 100) == pytest.approx(20.9, abs=0.05)
    assert choose_discretization(SimpleNamespace(area=5.35, extent=50.0), 100) == pytest.approx(2.31, abs=0.01)
    # clamps
    assert choose_discretization(SimpleNamespace(area=0.01, extent=50.0), 100, t=0.3) == pytest.approx(0.6)
    assert choose_discretization(SimpleNamespace(area=400.0, extent=30.0), 9) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        choose_discretization(SimpleNamespace(area=1.0, extent=1.0), 100)
    with pytest.raises(ValueError):
        choose_discretization(SimpleNamespace(area=0.0, extent=10.0), 100)


def test_four_times_target_halves_spacing(bump):
    d1 = choose_discretization(bump, 50)
    d4 = choose_discretization(bump, 200)
    assert d4 == pytest.approx(d1 / 2, rel=0.05)


def test_config_validation():
    with pytest.raises(ValueError):
        MeshConfig(target_node_count=8)
    with pytest.raises(ValueError):
        MeshConfig(fiber_angles=(10.0, 190.0))


@pytest.mark.parametrize("angles", [(0.0, 90.0), (45.0, 135.0)])
def test_flat_surface_gives_regular_lattice(bump, angles):
    flat = GridSurface(bump.ref_surface.origin, bump.ref_surface.spacing, np.zeros(bump.ref_surface.shape))
    delta = 8.0
    paths = seed_fiber_paths(bump, delta, angles, surf=flat)
    for p, a in zip(paths, angles):
        d = np.diff(p.xy, axis=0)
        heading = np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 180.0
        assert np.allclose(heading, a % 180.0, atol=1e-6)
    net = place_nodes(bump, paths, delta, surf=flat)
    assert np.allclose(_chords(net), delta, rtol=1e-9)
    index = {tuple(ij): k for k, ij in enumerate(net.lattice)}
    a1, a2 = np.radians(angles)
    e1, e2 = np.array([np.cos(a1), np.sin(a1)]), np.array([np.cos(a2), np.sin(a2)])
    seed = net.nodes[index[(0, 0)], :2]
    for (i, j), k in index.items():
        assert np.allclose(net.nodes[k, :2], seed + delta * (i * e1 + j * e2), atol=1e-6)


def test_hemisphere_chords_within_construction_tolerance(bump):
    net = mesh_patch(bump)
    assert np.all(np.abs(_chords(net) - net.delta) <= 1e-6 * net.delta)
    assert net.meta["chord_approximation"] is True


def test_cylinder_mold_chords():
    p = _patch([Pocket((100, 100), (40, 40), 6.0)], mold="cylinder", mold_radius=150.0)
    net = mesh_patch(p)
    assert np.all(np.abs(_chords(net) - net.delta) <= 1e-6 * net.delta)


def test_cylinder_path_spacing_on_surface():
    # bare cylinder, path across the curvature: consecutive nodes are delta
    # apart in 3D, i.e. the arc between them is 2 R asin(delta / 2 R)
    R = 60.0
    surf = GridSurface.from_function(lambda X, Y: np.sqrt(R**2 - (X - 100.0) ** 2) - R, (40, 160), (40, 160), 0.25)
    bump = _patch([Pocket((100, 100), (40, 40), 6.0)])
    net = place_nodes(bump, seed_fiber_paths(bump, 5.0, (0.0, 90.0), surf=surf), 5.0, surf=surf)
    row = net.nodes[net.lattice[:, 1] == 0]
    row = row[np.argsort(row[:, 0])]
    assert np.allclose(np.linalg.norm(np.diff(row, axis=0), axis=1), 5.0, rtol=1e-6)
    theta = np.arcsin((row[:, 0] - 100.0) / R)
    assert np.allclose(np.diff(theta) * R, 2 * R * np.arcsin(5.0 / (2 * R)), rtol=1e-4)


def test_connectivity_symmetric_and_simple(bump):
    net = mesh_patch(bump)
    nb = net.neighbors
    for k in range(net.n_nodes):
        for s in range(4):
            m = nb[k, s]
            if m >= 0:
                assert nb[m, (s + 2) % 4] == k
    e = net.edges
    assert len({tuple(sorted(x)) for x in e.tolist()}) == len(e)
    interior = net.mask(INTERIOR)
    assert np.all((nb[interior] >= 0).all(axis=1))


def test_flat_rectangle_edge_count():
    net = lattice_net(5, 3, 10.0)
    assert len(net.edges) == 4 * 3 + 5 * 2


def test_trimming_keeps_pocket_nodes(bump):
    delta = choose_discretization(bump)
    raw = place_nodes(bump, seed_fiber_paths(bump, delta), delta)
    net = classify_boundary(raw, bump)
    from shapely import contains_xy

    inside = contains_xy(bump.region, raw.nodes[:, 0], raw.nodes[:, 1])
    kept = {tuple(x) for x in net.lattice.tolist()}
    assert all(tuple(ij) in kept for ij in raw.lattice[inside].tolist())


def test_interior_pocket_all_fixed(bump):
    net = mesh_patch(bump)
    assert not net.mask(FREE).any()
    assert net.mask(FIXED).any()
    gap = net.nodes[:, 2] - bump.ref_surface.evaluate(net.nodes[:, 0], net.nodes[:, 1])
    off = net.mask(FIXED) & (gap > MeshConfig().mold_contact_tol)
    assert off.sum() == net.meta["rim_off_mold"]


def test_pocket_near_ply_edge_has_free_side():
    outline = box(0, 0, 200, 200).exterior.coords[:-1]
    p = _patch([Pocket((35, 100), (30, 30), 6.0)], outline=[list(c) for c in outline])
    assert p.near_ply_boundary
    net = mesh_patch(p)
    free, fixed = net.mask(FREE), net.mask(FIXED)
    assert free.any() and fixed.any()
    assert net.nodes[free, 0].mean() < net.nodes[fixed, 0].mean()


def test_narrow_ply_all_free():
    outline = [[0, 80], [200, 80], [200, 120], [0, 120]]
    p = _patch([Pocket((100, 100), (20, 20), 6.0)], outline=outline)
    net = mesh_patch(p)
    rim = net.node_class != INTERIOR
    assert np.all(net.node_class[rim] == FREE)


def test_net_round_trip(tmp_path, bump):
    net = mesh_patch(bump)
    net.save(tmp_path / "n.json")
    back = PlyNet.load(tmp_path / "n.json")
    assert np.array_equal(back.nodes, net.nodes)
    assert np.array_equal(back.node_class, net.node_class)
    assert np.array_equal(back.edges, net.edges)
    assert back.delta == net.delta and back.patch_area == net.patch_area
