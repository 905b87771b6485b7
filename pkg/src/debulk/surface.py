"""Bilinear height fields on a regular XY grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class GridSurface:
    """Height field ``z = F(x, y)`` sampled on a regular grid.

    ``values[j, i]`` is the height at ``(x0 + i*dx, y0 + j*dy)``. Evaluation
    is bilinear inside each cell with the matching per-cell analytic
    gradient; queries outside the grid are clamped to the border. All
    lengths in mm.
    """

    origin: tuple[float, float]
    spacing: tuple[float, float]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 2:
            raise ValueError("values must be a 2D grid with at least 2x2 samples")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("surface values must be finite; fill gaps first")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))

    @classmethod
    def from_function(cls, fn, xlim, ylim, spacing) -> "GridSurface":
        xs = np.arange(xlim[0], xlim[1] + 0.5 * spacing, spacing)
        ys = np.arange(ylim[0], ylim[1] + 0.5 * spacing, spacing)
        X, Y = np.meshgrid(xs, ys)
        return cls((xs[0], ys[0]), (spacing, spacing), fn(X, Y))

    @classmethod
    def filled(cls, origin, spacing, values) -> "GridSurface":
        """Build from a grid with NaN gaps, filling each gap with its nearest
        valid sample."""
        v = np.asarray(values, dtype=float)
        bad = ~np.isfinite(v)
        if bad.all():
            raise ValueError("no valid samples")
        if bad.any():
            idx = ndimage.distance_transform_edt(bad, return_distances=False, return_indices=True)
            v = v[tuple(idx)]
        return cls(origin, spacing, v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.spacing[0] * np.arange(self.shape[1])

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.spacing[1] * np.arange(self.shape[0])

    @property
    def bounds(self):
        return (self.xs[0], self.xs[-1], self.ys[0], self.ys[-1])

    def contains(self, x, y) -> np.ndarray:
        x0, x1, y0, y1 = self.bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def _locate(self, x, y):
        ny, nx = self.shape
        u = (np.asarray(x, dtype=float) - self.origin[0]) / self.spacing[0]
        v = (np.asarray(y, dtype=float) - self.origin[1]) / self.spacing[1]
        inside_u = (u >= 0) & (u <= nx - 1)
        inside_v = (v >= 0) & (v <= ny - 1)
        u = np.clip(u, 0.0, nx - 1.0)
        v = np.clip(v, 0.0, ny - 1.0)
        i = np.minimum(np.floor(u).astype(int), nx - 2)
        j = np.minimum(np.floor(v).astype(int), ny - 2)
        return i, j, u - i, v - j, inside_u, inside_v

    def __call__(self, x, y) -> np.ndarray:
        return self.evaluate(x, y)

    def evaluate(self, x, y) -> np.ndarray:
        i, j, fu, fv, _, _ = self._locate(x, y)
        z = self.values
        return (
            z[j, i] * (1 - fu) * (1 - fv)
            + z[j, i + 1] * fu * (1 - fv)
            + z[j + 1, i] * (1 - fu) * fv
            + z[j + 1, i + 1] * fu * fv
        )

    def gradient(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell analytic partial derivatives ``(dF/dx, dF/dy)``.

        On a cell edge the cell with the lower index on the far side is used.
        Outside the grid the clamped direction has zero slope.
        """
        i, j, fu, fv, inu, inv = self._locate(x, y)
        z = self.values
        dzu = (z[j, i + 1] - z[j, i]) * (1 - fv) + (z[j + 1, i + 1] - z[j + 1, i]) * fv
        dzv = (z[j + 1, i] - z[j, i]) * (1 - fu) + (z[j + 1, i + 1] - z[j, i + 1]) * fu
        return np.where(inu, dzu / self.spacing[0], 0.0), np.where(inv, dzv / self.spacing[1], 0.0)

    def cross_derivative(self, x, y) -> np.ndarray:
        """``d2F/dxdy``, constant per cell (the other second partials of a
        bilinear patch vanish). Zero where either direction is clamped."""
        i, j, _, _, inu, inv = self._locate(x, y)
        z = self.values
        fxy = (z[j + 1, i + 1] - z[j + 1, i] - z[j, i + 1] + z[j, i]) / (self.spacing[0] * self.spacing[1])
        return np.where(inu & inv, fxy, 0.0)

    def evaluate_with_gradient(self, x, y):
        gx, gy = self.gradient(x, y)
        return self.evaluate(x, y), gx, gy

    def normal(self, x, y) -> np.ndarray:
        gx, gy = self.gradient(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def clip(self, xlim, ylim) -> "GridSurface":
        """Sub-grid covering at least the requested window (clamped to the
        grid extent)."""
        ny, nx = self.shape
        i0 = int(np.clip(np.floor((xlim[0] - self.origin[0]) / self.spacing[0]), 0, nx - 2))
        i1 = int(np.clip(np.ceil((xlim[1] - self.origin[0]) / self.spacing[0]), i0 + 1, nx - 1))
        j0 = int(np.clip(np.floor((ylim[0] - self.origin[1]) / self.spacing[1]), 0, ny - 2))
        j1 = int(np.clip(np.ceil((ylim[1] - self.origin[1]) / self.spacing[1]), j0 + 1, ny - 1))
        origin = (self.origin[0] + i0 * self.spacing[0], self.origin[1] + j0 * self.spacing[1])
        return GridSurface(origin, self.spacing, self.values[j0 : j1 + 1, i0 : i1 + 1].copy())

    def translated(self, dz: float) -> "GridSurface":
        return GridSurface(self.origin, self.spacing, self.values + dz)
