"""Pin-jointed net generation over an air-pocket patch.

Two fiber paths are marched over the ply surface from the pocket centre.
Nodes sit on those paths at chord spacing ``delta``; every other node is the
surface point at chord ``delta`` from its two already placed lattice
parents. The net is then trimmed to the pocket grown by ``delta`` and its
rim nodes are classified as fixed or free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq, least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from shapely import contains_xy
from shapely.geometry import Point, box
from shapely.ops import unary_union

from .net import FIXED, FREE, INTERIOR, PlyNet
from .segmentation import PLY_BOUNDARY_TOL, AirPocketPatch, trace_boundaries
from .surface import GridSurface

logger = logging.getLogger(__name__)

CONSTRUCTION_TOL = 1e-9  # relative chord accuracy of placed nodes


@dataclass(frozen=True)
class MeshConfig:
    target_node_count: int = 100
    fiber_angles: tuple = (0.0, 90.0)  # degrees in the XY plane
    ply_boundary_tol: float = PLY_BOUNDARY_TOL  # mm
    mold_contact_tol: float = 1.0  # mm
    ply_thickness: float = 0.3  # mm, lower clamp of delta is twice this

    def __post_init__(self):
        if self.target_node_count < 9:
            raise ValueError("target_node_count must be >= 9")
        a, b = self.fiber_angles
        if np.isclose((a - b) % 180.0, 0.0) or np.isclose((a - b) % 180.0, 180.0):
            raise ValueError("fiber angles must be distinct directions")
        if self.ply_boundary_tol < 0 or self.mold_contact_tol <= 0:
            raise ValueError("tolerances must be positive")


def choose_discretization(patch: AirPocketPatch, target_n: int = 100, t: float = 0.3) -> float:
    """Node spacing from the pocket area and a target node count, clamped to
    ``[2 t, extent / 3]`` (all mm)."""
    if not patch.area > 0:
        raise ValueError("patch area must be positive")
    lo, hi = 2.0 * t, patch.extent / 3.0
    if hi < lo:
        raise ValueError("patch too small to mesh")
    delta = np.sqrt(patch.area * 100.0 / target_n)
    return float(np.clip(delta, lo, hi))


def patch_center(patch: AirPocketPatch) -> np.ndarray:
    c = patch.region.centroid
    if not patch.region.contains(c):
        c = patch.region.representative_point()
    return np.array([c.x, c.y])


def lifted_region(patch: AirPocketPatch, contact_tol: float):
    """The pocket together with the surrounding ply that stands more than
    ``contact_tol`` off the mold (8-connected to the pocket)."""
    ply, ref = patch.ply_surface, patch.ref_surface
    gap = ply.values - ref.evaluate(*np.meshgrid(ply.xs, ply.ys))
    lab, _ = ndimage.label(gap > contact_tol, structure=np.ones((3, 3), dtype=bool))
    X, Y = np.meshgrid(ply.xs, ply.ys)
    inside = contains_xy(patch.region, X, Y)
    keep = np.unique(lab[inside & (lab > 0)])
    if keep.size == 0:
        return patch.region
    comp = np.isin(lab, keep)
    parts = [b.region(ply.origin, ply.spacing) for b in trace_boundaries(ndimage.binary_fill_holes(comp))]
    return unary_union([patch.region, *parts])


def offset_region(patch: AirPocketPatch, delta: float, contact_tol: float = 1.0):
    """``(core, offset)``: the lifted pocket and that region grown by
    ``delta``, limited to the surface grid when the heightmap ended there."""
    core = lifted_region(patch, contact_tol)
    offset = core.buffer(delta)
    x0, x1, y0, y1 = patch.ply_surface.bounds
    grid = box(x0, y0, x1, y1)
    if not grid.contains(offset):
        if not patch.margin_clipped:
            raise ValueError("margin too small")
        offset = offset.intersection(grid)
    return core, offset


def _on_surface(surf: GridSurface, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    return np.append(xy, float(surf.evaluate(xy[0], xy[1])))


def _tangent(surf: GridSurface, p, d) -> np.ndarray:
    _, gx, gy = surf.evaluate_with_gradient(p[0], p[1])
    n = np.array([-float(gx), -float(gy), 1.0])
    n /= np.linalg.norm(n)
    t = d - np.dot(d, n) * n
    return t / np.linalg.norm(t)


def _march(surf: GridSurface, start, direction, step, stop_region, need_region):
    """Follow the surface from ``start`` until leaving ``stop_region``.

    Raises if the surface grid ends while still inside ``need_region``.
    """
    x0, x1, y0, y1 = surf.bounds
    p = _on_surface(surf, start)
    d = _tangent(surf, p, np.append(direction, 0.0))
    pts = [p[:2]]
    for _ in range(100000):
        q = p + step * d
        if not (x0 <= q[0] <= x1 and y0 <= q[1] <= y1):
            if contains_xy(need_region, q[0], q[1]):
                raise ValueError("margin too small")
            break
        q = _on_surface(surf, q[:2])
        d = _tangent(surf, q, q - p)
        pts.append(q[:2])
        p = q
        if not contains_xy(stop_region, p[0], p[1]):
            break
    return np.array(pts)


@dataclass
class FiberPath:
    """XY polyline of a surface path; ``center`` indexes the seed point."""

    xy: np.ndarray
    center: int
    angle: float


def seed_fiber_paths(patch: AirPocketPatch, delta: float, fiber_angles=(0.0, 90.0), contact_tol: float = 1.0, surf=None):
    """Two surface paths through the patch centre along the fiber angles,
    reaching one spacing past the offset boundary."""
    surf = patch.ply_surface if surf is None else surf
    c = patch_center(patch)
    _, offset = offset_region(patch, delta, contact_tol)
    zone = offset.buffer(delta)
    paths = []
    for a in fiber_angles:
        d = np.array([np.cos(np.radians(a)), np.sin(np.radians(a))])
        fwd = _march(surf, c, d, delta / 10.0, zone, offset)
        bwd = _march(surf, c, -d, delta / 10.0, zone, offset)
        paths.append(FiberPath(np.vstack([bwd[::-1], fwd[1:]]), len(bwd) - 1, a))
    return paths


def _nodes_along(surf: GridSurface, path: FiberPath, delta: float, sense: int):
    """Chord-spaced surface nodes from the centre of ``path`` in one sense."""
    xy = path.xy if sense > 0 else path.xy[::-1]
    c = path.center if sense > 0 else len(path.xy) - 1 - path.center
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s_cum = np.concatenate([[0.0], np.cumsum(seg)])

    def point(s):
        k = min(np.searchsorted(s_cum, s, side="right") - 1, len(seg) - 1)
        w = (s - s_cum[k]) / seg[k] if seg[k] > 0 else 0.0
        return _on_surface(surf, xy[k] + w * (xy[k + 1] - xy[k]))

    out = [point(s_cum[c])]
    s_prev, k = s_cum[c], c
    while True:
        q = out[-1]
        # first vertex beyond the previous node at chord >= delta
        k = max(k, np.searchsorted(s_cum, s_prev, side="right"))
        while k < len(s_cum) and np.linalg.norm(point(s_cum[k]) - q) < delta:
            k += 1
        if k >= len(s_cum):
            return np.array(out)
        lo = max(s_prev, s_cum[k - 1])
        s = brentq(lambda s: np.linalg.norm(point(s) - q) - delta, lo, s_cum[k], xtol=1e-13 * delta)
        out.append(point(s))
        s_prev = s


def _intersect(surf: GridSurface, A, B, guess, delta):
    """Surface point at chord ``delta`` from both ``A`` and ``B``."""

    def res(xy):
        P = _on_surface(surf, xy)
        return np.array([np.dot(P - A, P - A), np.dot(P - B, P - B)]) / delta**2 - 1.0

    def jac(xy):
        P = _on_surface(surf, xy)
        _, gx, gy = surf.evaluate_with_gradient(xy[0], xy[1])
        dP = np.array([[1.0, 0.0, float(gx)], [0.0, 1.0, float(gy)]])  # d P / d(x, y)
        return 2.0 * np.array([dP @ (P - A), dP @ (P - B)]) / delta**2

    xy = np.asarray(guess[:2], dtype=float)
    x0, x1, y0, y1 = surf.bounds
    for _ in range(30):
        r = res(xy)
        if np.max(np.abs(r)) < CONSTRUCTION_TOL:
            return _on_surface(surf, xy)
        try:
            step = np.linalg.solve(jac(xy), -r)
        except np.linalg.LinAlgError:
            break
        xy = xy + step
        if not (x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1):
            return None
    sol = least_squares(res, np.asarray(guess[:2], dtype=float), jac=jac, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if np.max(np.abs(sol.fun)) < CONSTRUCTION_TOL and x0 <= sol.x[0] <= x1 and y0 <= sol.x[1] <= y1:
        return _on_surface(surf, sol.x)
    return None


def place_nodes(patch: AirPocketPatch, paths, delta: float, contact_tol: float = 1.0, surf=None) -> PlyNet:
    """Build the unclassified net over the patch.

    Lattice index ``i`` counts nodes along the first fiber path and ``j``
    along the second; the seed node is ``(0, 0)``. Nodes more than one
    spacing beyond the offset boundary are not generated.
    """
    surf = patch.ply_surface if surf is None else surf
    _, offset = offset_region(patch, delta, contact_tol)
    zone = offset.buffer(delta + 1e-9)
    nodes: dict[tuple, np.ndarray] = {}
    p1f = _nodes_along(surf, paths[0], delta, +1)
    p1b = _nodes_along(surf, paths[0], delta, -1)
    p2f = _nodes_along(surf, paths[1], delta, +1)
    p2b = _nodes_along(surf, paths[1], delta, -1)
    nodes[(0, 0)] = p1f[0]
    for k in range(1, len(p1f)):
        nodes[(k, 0)] = p1f[k]
    for k in range(1, len(p1b)):
        nodes[(-k, 0)] = p1b[k]
    for k in range(1, len(p2f)):
        nodes[(0, k)] = p2f[k]
    for k in range(1, len(p2b)):
        nodes[(0, -k)] = p2b[k]
    imax = max(len(p1f), len(p1b))
    jmax = max(len(p2f), len(p2b))
    frontier = 0
    for si in (1, -1):
        for sj in (1, -1):
            # diagonal sweeps keep both parents available
            for s in range(2, imax + jmax + 1):
                for i in range(1, s):
                    j = s - i
                    a, b, c = (si * (i - 1), sj * j), (si * i, sj * (j - 1)), (si * (i - 1), sj * (j - 1))
                    if a not in nodes or b not in nodes or c not in nodes:
                        continue
                    A, B, C = nodes[a], nodes[b], nodes[c]
                    guess = A + B - C
                    if not contains_xy(zone, guess[0], guess[1]):
                        continue
                    P = _intersect(surf, A, B, guess, delta)
                    if P is None:
                        frontier += 1
                        continue
                    nodes[(si * i, sj * j)] = P
    if frontier:
        logger.warning("%d node(s) had no surface intersection; net lines stopped", frontier)
    lat = np.array(list(nodes.keys()), dtype=int)
    pts = np.array(list(nodes.values()))
    return PlyNet(pts, lat, delta, patch_area=0.0, fiber_angles=tuple(p.angle for p in paths), meta={"frontier_nodes": frontier})


def _largest_with_seed(net: PlyNet, keep: np.ndarray) -> np.ndarray:
    sub = net.subset(keep)
    e = sub.edges
    n = sub.n_nodes
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    seed = np.flatnonzero((sub.lattice == 0).all(axis=1))
    target = lab[seed[0]] if seed.size else np.bincount(lab).argmax()
    idx = np.flatnonzero(keep)
    out = np.zeros(net.n_nodes, dtype=bool)
    out[idx[lab == target]] = True
    return out


def surface_area(surf: GridSurface, region, spacing: float = None) -> float:
    """Surface area (mm^2) of ``surf`` over the XY ``region``, by midpoint
    sampling on a grid of ``spacing``."""
    h = min(surf.spacing) if spacing is None else spacing
    x0, y0, x1, y1 = region.bounds
    xs = np.arange(x0 + h / 2, x1, h)
    ys = np.arange(y0 + h / 2, y1, h)
    X, Y = np.meshgrid(xs, ys)
    inside = contains_xy(region, X, Y)
    _, gx, gy = surf.evaluate_with_gradient(X[inside], Y[inside])
    return float(np.sum(np.sqrt(1.0 + gx**2 + gy**2)) * h * h)


def classify_boundary(net: PlyNet, patch: AirPocketPatch, config: MeshConfig = MeshConfig()) -> PlyNet:
    """Trim the net to the offset boundary and label its nodes.

    The offset boundary is the lifted pocket (see :func:`lifted_region`)
    grown by ``delta``. Nodes in the ring outside the lifted pocket that
    touch the mold (within ``mold_contact_tol``) are rim nodes, as is any
    node left with fewer than four neighbors. Rim nodes within
    ``ply_boundary_tol`` of the ply outline are free, the rest fixed.
    """
    delta = net.delta
    core, offset = offset_region(patch, delta, config.mold_contact_tol)
    offset = offset.buffer(1e-9)
    xy = net.nodes[:, :2]
    keep = contains_xy(offset, xy[:, 0], xy[:, 1])
    keep = _largest_with_seed(net, keep)
    sub = net.subset(keep)
    xy = sub.nodes[:, :2]
    inside = contains_xy(core, xy[:, 0], xy[:, 1])
    gap = sub.nodes[:, 2] - patch.ref_surface.evaluate(xy[:, 0], xy[:, 1])
    touching = (~inside) & (gap <= config.mold_contact_tol)
    open_edge = (sub.neighbors < 0).any(axis=1)
    rim = touching | open_edge
    if not rim.any():
        raise ValueError("open net")
    n_open = int((open_edge & ~touching).sum())
    if n_open:
        logger.info("patch %s: %d edge node(s) off the mold treated as rim", patch.id, n_open)
    cls = np.full(sub.n_nodes, INTERIOR)
    cls[rim] = FIXED
    if patch.ply_outline is not None:
        edge = patch.ply_outline.exterior
        near = np.array([edge.distance(Point(p)) <= config.ply_boundary_tol for p in xy])
        cls[rim & near] = FREE
    x0, x1, y0, y1 = patch.ply_surface.bounds
    area = surface_area(patch.ply_surface, offset.intersection(box(x0, y0, x1, y1)), min(delta / 4, 1.0))
    meta = dict(sub.meta, patch_id=patch.id, rim_off_mold=n_open, chord_approximation=True)
    return PlyNet(sub.nodes, sub.lattice, delta, area * 1e-6, cls, sub.fiber_angles, meta)


def mesh_patch(patch: AirPocketPatch, config: MeshConfig = MeshConfig(), delta: float = None) -> PlyNet:
    """Discretize, seed, place and classify in one call."""
    if delta is None:
        delta = choose_discretization(patch, config.target_node_count, config.ply_thickness)
    paths = seed_fiber_paths(patch, delta, config.fiber_angles, config.mold_contact_tol)
    return classify_boundary(place_nodes(patch, paths, delta, config.mold_contact_tol), patch, config)
