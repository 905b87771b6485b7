"""Air-pocket segmentation of a ply-minus-reference heightmap.

Cut the heightmap with a horizontal plane, fill enclosed holes, trace the
outer contour of each 8-connected pocket and keep those that are large and
tall enough. Survivors become self-contained patches for meshing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from shapely.geometry import MultiPoint, Point, Polygon, mapping, shape
from shapely.validation import make_valid

from .scanprep import HeightMap
from .surface import GridSurface

logger = logging.getLogger(__name__)

PLY_BOUNDARY_TOL = 20.0  # mm

# Moore neighborhood, clockwise on screen (row axis pointing down)
_MOORE = np.array([(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)])
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SegmentationSettings:
    cut_height: float = 2.0  # mm
    area_tol: float = 2.0  # cm^2
    peak_tol: float = 1.25  # mm

    def __post_init__(self):
        for name in ("cut_height", "area_tol", "peak_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def threshold_cut(hm: HeightMap, cut_height: float) -> np.ndarray:
    """Cells that are valid and strictly above ``cut_height``."""
    if not cut_height > 0:
        raise ValueError("cut_height must be positive")
    out = np.zeros(hm.shape, dtype=bool)
    out[hm.mask] = hm.values[hm.mask] > cut_height
    return out


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Set every background region not 4-connected to the border."""
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


@dataclass
class Boundary:
    """Outer contour of one 8-connected component.

    ``loop`` lists ``(row, col)`` pixels in tracing order (counter-clockwise
    in XY, start pixel not repeated); ``pixels`` is the whole component.
    """

    loop: np.ndarray
    pixels: np.ndarray

    def xy(self, origin, spacing) -> np.ndarray:
        return np.column_stack([origin[0] + spacing[0] * self.loop[:, 1], origin[1] + spacing[1] * self.loop[:, 0]])

    def region(self, origin, spacing) -> Polygon:
        """Pocket region in XY mm: the contour through pixel centres grown
        by half a cell so that single pixels and thin runs keep their area."""
        pts = self.xy(origin, spacing)
        half = 0.5 * min(spacing)
        if len(pts) >= 3:
            poly = make_valid(Polygon(pts))
        elif len(pts) == 2:
            poly = MultiPoint(pts).convex_hull
        else:
            poly = Point(pts[0])
        grown = poly.buffer(half, join_style="mitre")
        if grown.geom_type != "Polygon":
            grown = grown.convex_hull
        return grown


def _moore_trace(comp: np.ndarray, start) -> np.ndarray:
    """Moore-neighbor contour of the component containing ``start`` using
    Jacob's stopping criterion. ``start`` must be the first foreground pixel
    in raster order so that its west neighbor is background."""
    H, W = comp.shape

    def fg(r, c):
        return 0 <= r < H and 0 <= c < W and comp[r, c]

    s = (int(start[0]), int(start[1]))
    loop = [s]
    p = s
    back = 6  # entered from the west
    first_back = None
    for _ in range(8 * comp.size + 8):
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if fg(*q):
                nxt = q
                prev = (back + k - 1) % 8
                # backtrack: the last background cell examined, seen from q
                bcell = (p[0] + _MOORE[prev][0], p[1] + _MOORE[prev][1])
                break
        if nxt is None:
            return np.array(loop)  # isolated pixel
        nb = (bcell[0] - nxt[0], bcell[1] - nxt[1])
        back = int(np.flatnonzero((_MOORE[:, 0] == nb[0]) & (_MOORE[:, 1] == nb[1]))[0])
        if first_back is None:
            first_back = (nxt, back)
        elif (nxt, back) == first_back and p == s:
            break
        p = nxt
        loop.append(p)
    # the last append re-entered the start
    if len(loop) > 1 and loop[-1] == s:
        loop.pop()
    return np.array(loop)


def _ccw_in_xy(loop: np.ndarray) -> np.ndarray:
    if len(loop) < 3:
        return loop
    x, y = loop[:, 1].astype(float), loop[:, 0].astype(float)
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    if area2 < 0:
        loop = np.vstack([loop[:1], loop[1:][::-1]])
    return loop


def trace_boundaries(mask: np.ndarray) -> list[Boundary]:
    """One outer contour per 8-connected foreground component, in raster
    order of each component's first pixel."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    out = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == lab
        rows, cols = np.nonzero(sub)
        start = (rows[0], cols[0])  # np.nonzero is row-major
        loop = _moore_trace(np.pad(sub, 1), (start[0] + 1, start[1] + 1)) - 1
        offs = np.array([sl[0].start, sl[1].start])
        out.append(Boundary(_ccw_in_xy(loop + offs), np.column_stack([rows, cols]) + offs))
    return out


@dataclass
class AirPocketPatch:
    """One pocket with the surfaces needed to mesh and evaluate it.

    ``ply_surface`` and ``ref_surface`` cover the pocket bounding box grown
    by ``margin`` (clipped to the heightmap; ``margin_clipped`` tells).
    """

    id: int
    boundary: np.ndarray  # (K, 2) XY mm, counter-clockwise
    region: Polygon
    pixels: np.ndarray  # (M, 2) heightmap (row, col)
    ply_surface: GridSurface
    ref_surface: GridSurface
    area: float  # cm^2
    peak: float  # mm
    margin: float  # mm
    near_ply_boundary: bool = False
    margin_clipped: bool = False
    ply_outline: Optional[Polygon] = None
    meta: dict = field(default_factory=dict)

    @property
    def extent(self) -> float:
        x0, y0, x1, y1 = self.region.bounds
        return min(x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        def grid(s: GridSurface):
            return {"origin": list(s.origin), "spacing": list(s.spacing), "values": s.values.tolist()}

        return {
            "id": self.id,
            "boundary_xy_mm": self.boundary.tolist(),
            "region": mapping(self.region),
            "pixels": self.pixels.tolist(),
            "ply_surface": grid(self.ply_surface),
            "ref_surface": grid(self.ref_surface),
            "area_cm2": self.area,
            "peak_mm": self.peak,
            "margin_mm": self.margin,
            "near_ply_boundary": self.near_ply_boundary,
            "margin_clipped": self.margin_clipped,
            "ply_outline": None if self.ply_outline is None else mapping(self.ply_outline),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AirPocketPatch":
        def grid(g):
            return GridSurface(tuple(g["origin"]), tuple(g["spacing"]), np.array(g["values"], dtype=float))

        return cls(
            id=d["id"],
            boundary=np.array(d["boundary_xy_mm"], dtype=float).reshape(-1, 2),
            region=shape(d["region"]),
            pixels=np.array(d["pixels"], dtype=int).reshape(-1, 2),
            ply_surface=grid(d["ply_surface"]),
            ref_surface=grid(d["ref_surface"]),
            area=d["area_cm2"],
            peak=d["peak_mm"],
            margin=d["margin_mm"],
            near_ply_boundary=d["near_ply_boundary"],
            margin_clipped=d["margin_clipped"],
            ply_outline=None if d.get("ply_outline") is None else shape(d["ply_outline"]),
            meta=d.get("meta", {}),
        )


def save_patches(path, patches) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in patches]))


def load_patches(path) -> list[AirPocketPatch]:
    return [AirPocketPatch.from_dict(d) for d in json.loads(Path(path).read_text())]


def ply_outline_from_mask(hm: HeightMap) -> Polygon:
    """Outline of the largest valid region of the heightmap, used as the ply
    outline when none is supplied."""
    bounds = trace_boundaries(fill_holes(hm.mask))
    if not bounds:
        raise ValueError("heightmap has no valid cells")
    best = max(bounds, key=lambda b: len(b.pixels))
    return best.region(hm.origin, hm.spacing)


def default_margin(area_cm2: float, target_nodes: int = 100) -> float:
    """Three times the node spacing the area rule would give."""
    return 3.0 * np.sqrt(area_cm2 * 100.0 / target_nodes)


def _touches_invalid(valid: np.ndarray, pixels: np.ndarray) -> bool:
    """True when a pocket pixel or one of its 8 neighbors is masked out
    of the heightmap, so part of the pocket was never measured."""
    own = np.zeros_like(valid, dtype=bool)
    own[pixels[:, 0], pixels[:, 1]] = True
    near = ndimage.binary_dilation(own, structure=_EIGHT)
    return bool((near & ~valid).any())


def _lifted_overhang(hm: HeightMap, pixels: np.ndarray, lifted_lab: np.ndarray) -> float:
    """How far (mm) the lifted ply attached to a pocket reaches beyond the
    pocket's bounding box."""
    r, c = pixels[:, 0], pixels[:, 1]
    ids = np.unique(lifted_lab[r, c])
    ids = ids[ids > 0]
    if ids.size == 0:
        return 0.0
    rr, cc = np.nonzero(np.isin(lifted_lab, ids))
    dx = max(c.min() - cc.min(), cc.max() - c.max(), 0) * hm.spacing[0]
    dy = max(r.min() - rr.min(), rr.max() - r.max(), 0) * hm.spacing[1]
    return float(max(dx, dy))


def extract_patches(
    hm: HeightMap,
    ref: GridSurface,
    boundaries: list[Boundary],
    settings: SegmentationSettings = SegmentationSettings(),
    margin: Optional[float] = None,
    ply_outline: Optional[Polygon] = None,
    ply_boundary_tol: float = PLY_BOUNDARY_TOL,
    target_nodes: int = 100,
    contact_tol: float = 1.0,
) -> list[AirPocketPatch]:
    """Filter traced pockets by area and peak and cut out their surfaces.

    Parameters
    ----------
    margin : float, optional
        Outer margin in mm around the pocket bounding box. Defaults to three
        node spacings of the area rule with ``target_nodes``, plus however far
        the ply stays more than ``contact_tol`` off the mold beyond the box.
    ply_outline : Polygon, optional
        Ply edge in XY mm; defaults to the outline of the valid heightmap.

    Returns
    -------
    list of AirPocketPatch
        Sorted by descending area and numbered from 1.
    """
    if ply_outline is None:
        ply_outline = ply_outline_from_mask(hm)
    edge = ply_outline.exterior
    x_all, y_all = hm.xs, hm.ys
    cands = []
    for b in boundaries:
        r, c = b.pixels[:, 0], b.pixels[:, 1]
        ok = hm.mask[r, c]
        if not ok.any():
            continue
        area = len(b.pixels) * hm.cell_area / 100.0
        peak = float(hm.values[r[ok], c[ok]].max())
        if area < settings.area_tol or peak < settings.peak_tol:
            logger.debug("discarding pocket: area %.2f cm2, peak %.2f mm", area, peak)
            continue
        cands.append((area, peak, b))
    cands.sort(key=lambda t: -t[0])
    lifted_lab = None
    if margin is None and cands:
        # gaps filled the way the patch surfaces are, so meshing sees the same lift
        filled = GridSurface.filled(hm.origin, hm.spacing, np.where(hm.mask, hm.values, np.nan)).values
        lifted = filled > contact_tol
        lifted_lab, _ = ndimage.label(lifted, structure=np.ones((3, 3), dtype=bool))

    out = []
    for pid, (area, peak, b) in enumerate(cands, start=1):
        region = b.region(hm.origin, hm.spacing)
        if margin is None:
            m = default_margin(area, target_nodes) + _lifted_overhang(hm, b.pixels, lifted_lab)
        else:
            m = float(margin)
        x0, y0, x1, y1 = region.bounds
        want = (x0 - m, x1 + m, y0 - m, y1 + m)
        i0 = max(0, int(np.floor((want[0] - hm.origin[0]) / hm.spacing[0])))
        i1 = min(hm.shape[1] - 1, int(np.ceil((want[1] - hm.origin[0]) / hm.spacing[0])))
        j0 = max(0, int(np.floor((want[2] - hm.origin[1]) / hm.spacing[1])))
        j1 = min(hm.shape[0] - 1, int(np.ceil((want[3] - hm.origin[1]) / hm.spacing[1])))
        clipped = (
            x_all[i0] > want[0] + 1e-9 or x_all[i1] < want[1] - 1e-9 or y_all[j0] > want[2] + 1e-9 or y_all[j1] < want[3] - 1e-9
        )
        if clipped:
            logger.warning("pocket %d: margin %.1f mm exceeds the heightmap; clipped", pid, m)
        xs, ys = x_all[i0 : i1 + 1], y_all[j0 : j1 + 1]
        X, Y = np.meshgrid(xs, ys)
        zref = ref.evaluate(X, Y)
        h = np.where(hm.mask[j0 : j1 + 1, i0 : i1 + 1], hm.values[j0 : j1 + 1, i0 : i1 + 1], np.nan)
        ply = GridSurface.filled((xs[0], ys[0]), hm.spacing, zref + h)
        refs = GridSurface((xs[0], ys[0]), hm.spacing, zref)
        out.append(
            AirPocketPatch(
                id=pid,
                boundary=b.xy(hm.origin, hm.spacing),
                region=region,
                pixels=b.pixels.copy(),
                ply_surface=ply,
                ref_surface=refs,
                area=area,
                peak=peak,
                margin=m,
                near_ply_boundary=bool(region.distance(edge) <= ply_boundary_tol),
                margin_clipped=bool(clipped),
                ply_outline=ply_outline,
                meta={"area_units": "cm2", "low_confidence": _touches_invalid(hm.mask, b.pixels)},
            )
        )
    return out


def segment(
    hm: HeightMap,
    ref: GridSurface,
    settings: SegmentationSettings = SegmentationSettings(),
    margin: Optional[float] = None,
    ply_outline: Optional[Polygon] = None,
    ply_boundary_tol: float = PLY_BOUNDARY_TOL,
    target_nodes: int = 100,
    contact_tol: float = 1.0,
) -> list[AirPocketPatch]:
    """Cut, fill, trace and filter in one call."""
    mask = fill_holes(threshold_cut(hm, settings.cut_height))
    return extract_patches(hm, ref, trace_boundaries(mask), settings, margin, ply_outline, ply_boundary_tol, target_nodes, contact_tol)
