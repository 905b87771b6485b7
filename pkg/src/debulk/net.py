"""Pin-jointed ply net: nodes on a two-family fiber lattice."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INTERIOR, FIXED, FREE = 0, 1, 2
CLASS_NAMES = {INTERIOR: "interior", FIXED: "fixed_boundary", FREE: "free_boundary"}
CLASS_CODES = {v: k for k, v in CLASS_NAMES.items()}

# neighbor slots: +fiber1, +fiber2, -fiber1, -fiber2
SLOT_OFFSETS = np.array([(1, 0), (0, 1), (-1, 0), (0, -1)])


@dataclass
class PlyNet:
    """Node coordinates (mm) on an ``(i, j)`` fiber lattice.

    ``neighbors[k, s]`` is the node reached from node ``k`` by the lattice
    step ``SLOT_OFFSETS[s]``, or -1. ``delta`` is the node spacing in mm and
    ``patch_area`` the ply patch area in m^2 used for nodal loads.
    """

    nodes: np.ndarray
    lattice: np.ndarray
    delta: float
    patch_area: float
    node_class: np.ndarray = None
    fiber_angles: tuple = (0.0, 90.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 3)
        self.lattice = np.asarray(self.lattice, dtype=int).reshape(-1, 2)
        if len(self.nodes) != len(self.lattice):
            raise ValueError("nodes and lattice indices differ in length")
        if self.node_class is None:
            self.node_class = np.zeros(len(self.nodes), dtype=int)
        self.node_class = np.asarray(self.node_class, dtype=int)
        self.neighbors = self._build_neighbors()

    def _build_neighbors(self):
        index = {tuple(ij): k for k, ij in enumerate(self.lattice)}
        if len(index) != len(self.lattice):
            raise ValueError("duplicate lattice indices")
        nb = np.full((len(self.lattice), 4), -1, dtype=int)
        for k, (i, j) in enumerate(self.lattice):
            for s, (di, dj) in enumerate(SLOT_OFFSETS):
                nb[k, s] = index.get((i + di, j + dj), -1)
        return nb

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> np.ndarray:
        """Unique connected pairs ``(C1, C2)`` along both fiber families."""
        out = []
        for s in (0, 1):
            k = np.flatnonzero(self.neighbors[:, s] >= 0)
            out.append(np.column_stack([k, self.neighbors[k, s]]))
        return np.vstack(out) if out else np.zeros((0, 2), dtype=int)

    def mask(self, cls: int) -> np.ndarray:
        return self.node_class == cls

    def subset(self, keep: np.ndarray) -> "PlyNet":
        keep = np.asarray(keep, dtype=bool)
        return PlyNet(
            self.nodes[keep],
            self.lattice[keep],
            self.delta,
            self.patch_area,
            self.node_class[keep],
            self.fiber_angles,
            dict(self.meta),
        )

    def with_nodes(self, nodes) -> "PlyNet":
        return PlyNet(nodes, self.lattice, self.delta, self.patch_area, self.node_class.copy(), self.fiber_angles, dict(self.meta))

    def edge_lengths(self, nodes=None) -> np.ndarray:
        x = self.nodes if nodes is None else np.asarray(nodes).reshape(-1, 3)
        e = self.edges
        return np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": k, "i": int(ij[0]), "j": int(ij[1]), "x": float(p[0]), "y": float(p[1]), "z": float(p[2]), "class": CLASS_NAMES[int(c)]}
                for k, (ij, p, c) in enumerate(zip(self.lattice, self.nodes, self.node_class))
            ],
            "edges": self.edges.tolist(),
            "delta_mm": float(self.delta),
            "patch_area_m2": float(self.patch_area),
            "fiber_angles_deg": list(self.fiber_angles),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlyNet":
        rows = d["nodes"]
        net = cls(
            nodes=[(r["x"], r["y"], r["z"]) for r in rows],
            lattice=[(r["i"], r["j"]) for r in rows],
            delta=d["delta_mm"],
            patch_area=d["patch_area_m2"],
            node_class=[CLASS_CODES[r["class"]] for r in rows],
            fiber_angles=tuple(d.get("fiber_angles_deg", (0.0, 90.0))),
            meta=d.get("meta", {}),
        )
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "PlyNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lattice_net(ni: int, nj: int, delta: float, z=0.0, origin=(0.0, 0.0), patch_area=None) -> PlyNet:
    """Flat rectangular ``ni x nj`` lattice with spacing ``delta`` (mm)."""
    I, J = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    lat = np.column_stack([I.ravel(), J.ravel()])
    nodes = np.column_stack([origin[0] + delta * lat[:, 0], origin[1] + delta * lat[:, 1], np.full(len(lat), z, dtype=float)])
    if patch_area is None:
        patch_area = ni * nj * (delta * 1e-3) ** 2
    return PlyNet(nodes, lat, delta, patch_area)
