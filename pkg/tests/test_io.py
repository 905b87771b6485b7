import json

import numpy as np
import pytest

from debulk.io import read_cloud, read_heightmap, read_surface, write_cloud, write_heightmap, write_surface
from debulk.scanprep import HeightMap, OrganizedPointCloud
from debulk.surface import GridSurface


def _cloud(rng):
    pts = rng.normal(size=(4, 5, 3)) * 10
    valid = rng.random((4, 5)) > 0.2
    pts[~valid] = np.nan
    return OrganizedPointCloud(pts, valid)


@pytest.mark.parametrize("suffix", [".opc", ".csv", ".npz"])
def test_cloud_round_trip(tmp_path, rng, suffix):
    c = _cloud(rng)
    p = tmp_path / f"c{suffix}"
    write_cloud(p, c)
    back = read_cloud(p)
    assert np.array_equal(back.valid, c.valid)
    assert np.array_equal(back.points[c.valid], c.points[c.valid])


def test_cloud_header_transform_applied(tmp_path, rng):
    c = _cloud(rng)
    T = np.eye(4)
    T[:3, 3] = [1.0, -2.0, 3.0]
    p = tmp_path / "t.opc"
    write_cloud(p, c, transform=T)
    back = read_cloud(p)
    assert np.allclose(back.points[c.valid], c.points[c.valid] + [1.0, -2.0, 3.0])


def test_cloud_missing_header(tmp_path):
    p = tmp_path / "bad.opc"
    p.write_text("0 0 0 1\n")
    with pytest.raises(ValueError):
        read_cloud(p)


def test_heightmap_round_trip_bit_exact(tmp_path, rng):
    v = rng.normal(size=(6, 7)) * np.pi
    m = rng.random((6, 7)) > 0.3
    hm = HeightMap((0.1, -3.7), (0.5, 0.25), np.where(m, v, np.nan), m)
    write_heightmap(tmp_path / "h.json", hm)
    back = read_heightmap(tmp_path / "h.json")
    assert back == hm
    assert json.loads((tmp_path / "h.json").read_text())["dims"] == [6, 7]


def test_surface_round_trip(tmp_path):
    s = GridSurface.from_function(lambda X, Y: X * Y / 7.0, (0, 5), (0, 4), 0.5)
    write_surface(tmp_path / "s.json", s)
    back = read_surface(tmp_path / "s.json")
    assert np.array_equal(back.values, s.values)
    assert back.origin == s.origin


def test_grid_format_checked(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        read_heightmap(tmp_path / "x.json")
