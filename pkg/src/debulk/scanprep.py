"""Organized point clouds: outlier removal, median filtering and heightmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .surface import GridSurface


@dataclass
class OrganizedPointCloud:
    """Grid-ordered points, one per camera pixel.

    ``points`` has shape ``(height, width, 3)`` in mm (mold frame) and
    ``valid`` flags usable pixels.
    """

    points: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError("points must have shape (height, width, 3)")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.points), axis=2)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.points.shape[:2]:
            raise ValueError("validity mask does not match the point grid")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise ValueError("valid points must have finite coordinates")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def copy(self) -> "OrganizedPointCloud":
        return OrganizedPointCloud(self.points.copy(), self.valid.copy())

    def transformed(self, T) -> "OrganizedPointCloud":
        """Apply a 4x4 rigid transform to every point."""
        T = np.asarray(T, dtype=float)
        p = self.points @ T[:3, :3].T + T[:3, 3]
        return OrganizedPointCloud(p, self.valid.copy())


@dataclass
class HeightMap:
    """Ply-minus-reference heights on a regular grid.

    ``values[j, i]`` belongs to ``(x0 + i*dx, y0 + j*dy)``; ``mask`` marks
    valid cells. Invalid cells hold NaN.
    """

    origin: tuple[float, float]
    spacing: tuple[float, float]
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("spacing must be positive")
        if self.mask.shape != self.values.shape:
            raise ValueError("mask shape mismatch")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("valid cells must be finite")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))

    @property
    def shape(self):
        return self.values.shape

    @property
    def xs(self):
        return self.origin[0] + self.spacing[0] * np.arange(self.shape[1])

    @property
    def ys(self):
        return self.origin[1] + self.spacing[1] * np.arange(self.shape[0])

    def cell_centers(self):
        return np.meshgrid(self.xs, self.ys)

    @property
    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]

    def __eq__(self, other):
        if not isinstance(other, HeightMap):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.spacing == other.spacing
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[self.mask], other.values[other.mask])
        )


def denoise(cloud: OrganizedPointCloud, k: int = 4, return_removed: bool = False):
    """Statistical outlier removal.

    For every valid point the mean distance to its ``k`` nearest valid
    neighbors is computed; points whose mean exceeds the cloud-wide mean by
    more than one standard deviation are invalidated. The grid layout is
    kept.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = cloud.n_valid
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} valid points, got {n}")
    pts = cloud.valid_points()
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + mean_d.std()
    drop = mean_d > thresh
    out = cloud.copy()
    rows, cols = np.nonzero(cloud.valid)
    out.valid[rows[drop], cols[drop]] = False
    if return_removed:
        return out, int(drop.sum())
    return out


def median_filter(cloud: OrganizedPointCloud, window: int = 5) -> OrganizedPointCloud:
    """Replace the z of each valid pixel by the median of the valid z values
    in the surrounding ``window x window`` pixel block."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    out = cloud.copy()
    if window == 1:
        return out
    r = window // 2
    z = np.where(cloud.valid, cloud.points[..., 2], np.nan)
    zp = np.pad(z, r, mode="constant", constant_values=np.nan)
    med = np.empty_like(z)
    # row blocks keep the window stack small
    step = max(1, 200000 // max(1, cloud.width * window * window))
    for j0 in range(0, cloud.height, step):
        j1 = min(cloud.height, j0 + step)
        win = sliding_window_view(zp[j0 : j1 + 2 * r], (window, window))
        med[j0:j1] = np.nanmedian(win.reshape(win.shape[0], win.shape[1], -1), axis=2)
    out.points[..., 2] = np.where(cloud.valid, med, cloud.points[..., 2])
    return out


def build_heightmap(
    cloud: OrganizedPointCloud,
    ref: GridSurface,
    spacing: float = 1.0,
    support_radius: float = None,
) -> HeightMap:
    """Grid the ply surface and subtract the reference surface.

    Cells are placed on the intersection of the cloud footprint and the
    reference domain. Ply heights are linearly interpolated from the valid
    points; cells with no valid point within ``support_radius`` (default
    one cell diagonal) are masked.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = cloud.valid_points()
    if len(pts) < 3:
        raise ValueError("not enough valid points")
    rx0, rx1, ry0, ry1 = ref.bounds
    x0 = max(pts[:, 0].min(), rx0)
    x1 = min(pts[:, 0].max(), rx1)
    y0 = max(pts[:, 1].min(), ry0)
    y1 = min(pts[:, 1].max(), ry1)
    if x1 < x0 or y1 < y0:
        raise ValueError("cloud footprint does not overlap the reference surface")
    nx = int(np.floor((x1 - x0) / spacing + 1e-9)) + 1
    ny = int(np.floor((y1 - y0) / spacing + 1e-9)) + 1
    xs = x0 + spacing * np.arange(nx)
    ys = y0 + spacing * np.arange(ny)
    X, Y = np.meshgrid(xs, ys)
    q = np.column_stack([X.ravel(), Y.ravel()])
    radius = spacing * np.sqrt(2.0) if support_radius is None else support_radius
    d, _ = cKDTree(pts[:, :2]).query(q, k=1, distance_upper_bound=radius)
    supported = np.isfinite(d)
    z = np.full(len(q), np.nan)
    if supported.any():
        interp = LinearNDInterpolator(pts[:, :2], pts[:, 2])
        z[supported] = interp(q[supported])
    h = z - ref.evaluate(q[:, 0], q[:, 1])
    values = h.reshape(ny, nx)
    mask = np.isfinite(values)
    if not mask.any():
        raise ValueError("no heightmap cell is supported by the cloud")
    return HeightMap((xs[0], ys[0]), (spacing, spacing), values, mask)
