"""Geometric ridge model, thickness offset and the RMS crease/cease verdict.

A coarse net cannot resolve a wrinkle, so excess ply length left standing
after the solve is folded into a narrow ridge: a base on the mold on either
side and a fin of width ``2 t`` with a semicircular cap of radius ``t`` at
the section apex. Everything else lies on the mold at the consolidated
thickness ``t / beta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from .energy import MaterialParams
from .net import PlyNet
from .scanprep import HeightMap
from .surface import GridSurface

RMS_THRESHOLD = 0.3  # mm
VERDICTS = ("cease", "crease", "inconclusive")


def ridge_height(L_ply: float, L_mold: float, t: float) -> float:
    """Height (mm) of the ridge formed when a section of ply length
    ``L_ply`` is pressed onto a mold length ``L_mold``."""
    if L_mold <= 2.0 * t:
        raise ValueError("degenerate section")
    if L_ply < L_mold * (1.0 - 1e-12):
        raise ValueError("ply section shorter than the mold under it")
    L_base = 0.5 * (L_mold - 2.0 * t)
    return 0.5 * (L_ply - 2.0 * L_base - np.pi * t) + t


def ridge_trigger(t: float) -> float:
    """Excess length above which a section forms a ridge taller than ``t``."""
    return np.pi * t - 2.0 * t


@dataclass
class Ridge:
    apex: int
    family: int
    nodes: list  # section nodes, endpoints included
    L_ply: float
    L_mold: float
    height: float
    t: float

    @property
    def base_length(self) -> float:
        """Ply length lying flat on both sides of the fin."""
        return self.L_mold - 2.0 * self.t

    @property
    def ridge_perimeter(self) -> float:
        """Ply length in the two fin walls and the cap."""
        return 2.0 * (self.height - self.t) + np.pi * self.t


@dataclass
class RidgeField:
    """Per-node heights above the mold (mm) at the final XY positions.

    ``adjusted`` marks nodes whose height was set by a ridge section; those
    are left alone by later passes, which makes the post-processor
    idempotent.
    """

    xy: np.ndarray
    height: np.ndarray
    adjusted: np.ndarray
    ridges: list = field(default_factory=list)
    offset_done: bool = False

    def copy(self) -> "RidgeField":
        return RidgeField(self.xy.copy(), self.height.copy(), self.adjusted.copy(), list(self.ridges), self.offset_done)

    @property
    def max_height(self) -> float:
        return float(self.height.max()) if self.height.size else 0.0


def raw_field(nodes_mm: np.ndarray, ref: GridSurface) -> RidgeField:
    """Solver output as heights above the reference surface."""
    P = np.asarray(nodes_mm, dtype=float).reshape(-1, 3)
    d = P[:, 2] - ref.evaluate(P[:, 0], P[:, 1])
    return RidgeField(P[:, :2].copy(), d, np.zeros(len(P), dtype=bool))


def _mold_length(ref: GridSurface, xy: np.ndarray, step: float = 0.25) -> float:
    total = 0.0
    for a, b in zip(xy[:-1], xy[1:]):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
        s = np.linspace(0.0, 1.0, n)
        pts = a[None] + s[:, None] * (b - a)[None]
        z = ref.evaluate(pts[:, 0], pts[:, 1])
        total += float(np.sum(np.linalg.norm(np.diff(np.column_stack([pts, z]), axis=0), axis=1)))
    return total


def _section(net: PlyNet, k: int, family: int, above: np.ndarray) -> list:
    """Nodes of the run of above-mold nodes through ``k`` along a fiber
    family, extended by the bounding on-mold node at each end if any."""
    fwd, back = (0, 2) if family == 0 else (1, 3)
    nb = net.neighbors
    out = [k]
    for slot, front in ((fwd, False), (back, True)):
        cur = k
        while True:
            nxt = nb[cur, slot]
            if nxt < 0:
                break
            if front:
                out.insert(0, int(nxt))
            else:
                out.append(int(nxt))
            if not above[nxt]:
                break
            cur = nxt
    return out


def apply_ridges(
    field_in: RidgeField,
    net: PlyNet,
    nodes_mm: np.ndarray,
    ref: GridSurface,
    mat: MaterialParams = MaterialParams(),
) -> RidgeField:
    """Fold standing excess length into ridges, then put every other node
    at the consolidated thickness.

    Nodes are visited by descending height. For a node above the mold by
    more than ``t / beta`` the run of such nodes through it is taken along
    each fiber family; the family with more excess length (ply polyline
    minus mold arc) is the ridge section. Sections with excess above
    ``pi t - 2 t`` get the ridge profile centred at the apex, smaller ones
    are conforming. Only the chosen section's nodes are marked adjusted.
    """
    out = field_in.copy()
    t = mat.t * 1e3
    t_c = mat.consolidated_thickness * 1e3
    P = np.asarray(nodes_mm, dtype=float).reshape(-1, 3)
    above = out.height > t_c + 1e-12
    for k in np.argsort(-out.height, kind="stable"):
        if out.adjusted[k] or not above[k]:
            continue
        best = None
        for fam in (0, 1):
            sec = _section(net, int(k), fam, above)
            if len(sec) < 2:
                continue
            L_ply = float(np.sum(np.linalg.norm(np.diff(P[sec], axis=0), axis=1)))
            L_mold = _mold_length(ref, P[sec, :2])
            if best is None or L_ply - L_mold > best[1] - best[2]:
                best = (sec, L_ply, L_mold, fam)
        if best is None:
            continue
        sec, L_ply, L_mold, fam = best
        if L_ply - L_mold <= ridge_trigger(t) or L_mold <= 2.0 * t:
            continue  # conforming section
        h = ridge_height(L_ply, L_mold, t)
        # arc position along the section, measured from the apex
        seg = np.linalg.norm(np.diff(P[sec, :2], axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.abs(s - s[sec.index(int(k))])
        cap = np.where(s < t, h - t + np.sqrt(np.maximum(t * t - s * s, 0.0)), t_c)
        run = [n for n in sec if above[n] or n == k]
        for n in run:
            i = sec.index(n)
            out.height[n] = cap[i]
            out.adjusted[n] = True
        out.ridges.append(Ridge(int(k), fam, sec, L_ply, L_mold, h, t))
    out.height[~out.adjusted] = t_c
    out.offset_done = True
    return out


def postprocess(net: PlyNet, nodes_mm: np.ndarray, ref: GridSurface, mat: MaterialParams = MaterialParams()) -> RidgeField:
    return apply_ridges(raw_field(nodes_mm, ref), net, nodes_mm, ref, mat)


def rasterize(field_: RidgeField, hm_like: HeightMap, pixels: np.ndarray) -> HeightMap:
    """Sample the node field on heightmap cells ``pixels`` (row, col) by
    linear interpolation over the node positions; cells outside the node
    hull take the nearest node."""
    rows, cols = pixels[:, 0], pixels[:, 1]
    x = hm_like.origin[0] + hm_like.spacing[0] * cols
    y = hm_like.origin[1] + hm_like.spacing[1] * rows
    lin = LinearNDInterpolator(field_.xy, field_.height)(x, y)
    miss = ~np.isfinite(lin)
    if miss.any():
        lin[miss] = NearestNDInterpolator(field_.xy, field_.height)(x[miss], y[miss])
    values = np.full(hm_like.shape, np.nan)
    values[rows, cols] = lin
    mask = np.zeros(hm_like.shape, dtype=bool)
    mask[rows, cols] = True
    return HeightMap(hm_like.origin, hm_like.spacing, values, mask)


def rms(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty contour sample")
    return float(np.sqrt(np.mean(v * v)))


@dataclass
class DebulkReport:
    pocket_id: int
    rms: float
    verdict: str
    predicted_max: float
    raw_max: float
    heightfield: Optional[HeightMap] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")

    def to_dict(self, include_field: bool = False) -> dict:
        d = {
            "pocket_id": self.pocket_id,
            "rms_mm": self.rms,
            "verdict": self.verdict,
            "predicted_max_mm": self.predicted_max,
            "raw_max_mm": self.raw_max,
            "diagnostics": self.diagnostics,
        }
        if include_field and self.heightfield is not None:
            from .io import grid_to_dict

            hf = self.heightfield
            d["heightfield"] = grid_to_dict(hf.origin, hf.spacing, hf.values, hf.mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DebulkReport":
        hf = None
        if "heightfield" in d:
            from .io import grid_from_dict

            hf = HeightMap(*grid_from_dict(d["heightfield"]))
        def num(v):
            return float("nan") if v is None else float(v)

        return cls(d["pocket_id"], num(d["rms_mm"]), d["verdict"], num(d["predicted_max_mm"]), num(d["raw_max_mm"]), hf, d.get("diagnostics", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_field=True), indent=1))

    @classmethod
    def load(cls, path) -> "DebulkReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def classify(
    heightfield,
    threshold: float = RMS_THRESHOLD,
    converged: bool = True,
    pocket_id: int = 0,
    raw_max: float = float("nan"),
    diagnostics: Optional[dict] = None,
) -> DebulkReport:
    """RMS of the heights over the pocket contour and the verdict.

    ``heightfield`` is a :class:`HeightMap` (masked cells are the sample) or
    an array of sampled heights. ``cease`` iff ``rms <= threshold`` and the
    solve converged; an unconverged solve is ``inconclusive``.
    """
    if isinstance(heightfield, HeightMap):
        sample = heightfield.values[heightfield.mask]
        hf = heightfield
    else:
        sample = np.asarray(heightfield, dtype=float).ravel()
        hf = None
    r = rms(sample)
    if not converged:
        verdict = "inconclusive"
    else:
        verdict = "cease" if r <= threshold else "crease"
    return DebulkReport(pocket_id, r, verdict, float(sample.max()), raw_max, hf, dict(diagnostics or {}))
