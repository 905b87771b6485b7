"""File formats for clouds, grids, patches and reports.

Point clouds
    ``.opc``  text grid: ``#``-header with width, height and a 4x4 row-major
              frame transform, then ``x y z valid`` per pixel, row-major.
    ``.csv``  columns ``row,col,x,y,z,valid``.
    ``.npz``  arrays ``points (H, W, 3)``, ``valid (H, W)``, optional
              ``transform (4, 4)``.
Grids (heightmaps and reference surfaces)
    ``.json`` ``{"format": "grid/1", origin, spacing, dims, values, mask}``
              with row-major values (``null`` where masked). Python's float
              repr makes the round trip bit-exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .scanprep import HeightMap, OrganizedPointCloud
from .surface import GridSurface

GRID_FORMAT = "grid/1"


def _header_value(lines, key):
    for ln in lines:
        parts = ln.lstrip("#").split()
        if parts and parts[0] == key:
            return parts[1:]
    return None


def read_cloud(path) -> OrganizedPointCloud:
    """Read an organized point cloud; a header transform is applied."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npz":
        d = np.load(path)
        cloud = OrganizedPointCloud(d["points"], d["valid"].astype(bool))
        if "transform" in d:
            cloud = cloud.transformed(d["transform"])
        return cloud
    if suffix == ".csv":
        return _read_cloud_csv(path)
    text = path.read_text().splitlines()
    header = [ln for ln in text if ln.startswith("#")]
    w = _header_value(header, "width")
    h = _header_value(header, "height")
    if w is None or h is None:
        raise ValueError(f"{path}: missing width/height header")
    width, height = int(w[0]), int(h[0])
    data = np.loadtxt([ln for ln in text if ln.strip() and not ln.startswith("#")], ndmin=2)
    if data.shape != (width * height, 4):
        raise ValueError(f"{path}: expected {width * height} rows of 'x y z valid'")
    pts = data[:, :3].reshape(height, width, 3)
    valid = data[:, 3].reshape(height, width) != 0
    pts[~valid] = np.nan
    cloud = OrganizedPointCloud(pts, valid)
    T = _header_value(header, "transform")
    if T is not None:
        cloud = cloud.transformed(np.array(T, dtype=float).reshape(4, 4))
    return cloud


def _read_cloud_csv(path) -> OrganizedPointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty cloud")
    r = np.array([int(x["row"]) for x in rows])
    c = np.array([int(x["col"]) for x in rows])
    H, W = r.max() + 1, c.max() + 1
    pts = np.full((H, W, 3), np.nan)
    valid = np.zeros((H, W), dtype=bool)
    for row, col, x in zip(r, c, rows):
        ok = str(x["valid"]).strip().lower() in ("1", "true", "yes")
        valid[row, col] = ok
        if ok:
            pts[row, col] = (float(x["x"]), float(x["y"]), float(x["z"]))
    return OrganizedPointCloud(pts, valid)


def write_cloud(path, cloud: OrganizedPointCloud, transform=None) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npz":
        extra = {} if transform is None else {"transform": np.asarray(transform, dtype=float)}
        np.savez(path, points=cloud.points, valid=cloud.valid, **extra)
        return
    if suffix == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "x", "y", "z", "valid"])
            for j in range(cloud.height):
                for i in range(cloud.width):
                    p = cloud.points[j, i]
                    ok = bool(cloud.valid[j, i])
                    w.writerow([j, i, *(repr(float(v)) if ok else "" for v in p), int(ok)])
        return
    T = np.eye(4) if transform is None else np.asarray(transform, dtype=float)
    lines = [
        "# organized-point-cloud",
        f"# width {cloud.width}",
        f"# height {cloud.height}",
        "# transform " + " ".join(repr(float(v)) for v in T.ravel()),
    ]
    pts = np.where(cloud.valid[..., None], cloud.points, 0.0).reshape(-1, 3)
    for p, ok in zip(pts, cloud.valid.ravel()):
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(ok)}")
    path.write_text("\n".join(lines) + "\n")


def grid_to_dict(origin, spacing, values, mask) -> dict:
    v = np.asarray(values, dtype=float)
    m = np.asarray(mask, dtype=bool)
    flat = [float(x) if ok else None for x, ok in zip(v.ravel(), m.ravel())]
    return {
        "format": GRID_FORMAT,
        "origin": [float(origin[0]), float(origin[1])],
        "spacing": [float(spacing[0]), float(spacing[1])],
        "dims": [int(v.shape[0]), int(v.shape[1])],
        "values": flat,
        "mask": [int(x) for x in m.ravel()],
    }


def grid_from_dict(d: dict):
    if d.get("format") != GRID_FORMAT:
        raise ValueError(f"not a {GRID_FORMAT} document")
    ny, nx = d["dims"]
    mask = np.array(d["mask"], dtype=bool).reshape(ny, nx)
    vals = np.array([np.nan if x is None else x for x in d["values"]], dtype=float).reshape(ny, nx)
    return tuple(d["origin"]), tuple(d["spacing"]), vals, mask


def write_heightmap(path, hm: HeightMap) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(hm.origin, hm.spacing, hm.values, hm.mask)))


def read_heightmap(path) -> HeightMap:
    origin, spacing, vals, mask = grid_from_dict(json.loads(Path(path).read_text()))
    return HeightMap(origin, spacing, vals, mask)


def write_surface(path, surf: GridSurface) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(surf.origin, surf.spacing, surf.values, np.ones(surf.shape, bool))))


def read_surface(path) -> GridSurface:
    """Read a reference surface from a grid file, or grid a point cloud file
    onto 1 mm cells."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        origin, spacing, vals, mask = grid_from_dict(json.loads(path.read_text()))
        vals = np.where(mask, vals, np.nan)
        return GridSurface.filled(origin, spacing, vals)
    return surface_from_cloud(read_cloud(path))


def surface_from_cloud(cloud: OrganizedPointCloud, spacing: float = 1.0) -> GridSurface:
    """Grid a reference scan into a bilinear surface (gaps filled by the
    nearest sample)."""
    from scipy.interpolate import LinearNDInterpolator

    pts = cloud.valid_points()
    xs = np.arange(pts[:, 0].min(), pts[:, 0].max() + 1e-9, spacing)
    ys = np.arange(pts[:, 1].min(), pts[:, 1].max() + 1e-9, spacing)
    X, Y = np.meshgrid(xs, ys)
    z = LinearNDInterpolator(pts[:, :2], pts[:, 2])(X, Y)
    return GridSurface.filled((xs[0], ys[0]), (spacing, spacing), z)
