"""Finely discretized 2D ply debulk model.

A ply cross-section is a chain of inextensible segments pressed onto a mold
profile ``z = f(x)``. Vacuum pressure is applied in load steps; before every
step the pressure direction is refreshed to the current segment normals and
then held fixed while the step is solved. The chain is parametrized by its
start point and segment angles, so segment lengths never change.

Units: mm for geometry at the interface, SI inside the energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .auglag import ALOptions, augmented_lagrangian, slsqp_warm_start
from .energy import MaterialParams

logger = logging.getLogger(__name__)


@dataclass
class MoldProfile:
    """Mold profile ``z = f(x)`` with derivative, both in mm."""

    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def curvature(self, x):
        if self.d2f is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return self.d2f(x)

    @classmethod
    def flat(cls, z0: float = 0.0) -> "MoldProfile":
        def zeros(x):
            return np.zeros_like(np.asarray(x, dtype=float))

        return cls(lambda x: zeros(x) + z0, zeros, zeros)


@dataclass
class Ply2D:
    nodes: np.ndarray  # (n+1, 2) x, z in mm
    start: str = "fixed"
    end: str = "fixed"
    mold: MoldProfile = field(default_factory=MoldProfile.flat)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2 or len(self.nodes) < 2:
            raise ValueError("nodes must be an (n+1, 2) array with n >= 1")
        if self.start not in ("fixed", "free") or self.end not in ("fixed", "free"):
            raise ValueError("end conditions must be 'fixed' or 'free'")
        if np.any(self.rest_lengths <= 0):
            raise ValueError("segment rest lengths must be positive")

    @property
    def rest_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.rest_lengths.sum())

    @classmethod
    def from_polyline(cls, vertices, n_segments: int, **kwargs) -> "Ply2D":
        """Resample a polyline into ``n_segments`` equal-length segments."""
        v = np.asarray(vertices, dtype=float)
        seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        targets = np.linspace(0.0, s[-1], n_segments + 1)
        pts = np.column_stack([np.interp(targets, s, v[:, 0]), np.interp(targets, s, v[:, 1])])
        return cls(pts, **kwargs)


@dataclass
class Wrinkle2DResult:
    steps: list  # list of (n+1, 2) arrays, one per load step, mm
    converged: list
    energies: list
    folded: bool  # some segment turned past vertical
    length_error: float
    start_energies: list = field(default_factory=list)  # previous solution under each new load
    nfev: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1]

    def apex_height(self, mold: Optional[MoldProfile] = None) -> float:
        mold = mold or MoldProfile.flat()
        x, z = self.final[:, 0], self.final[:, 1]
        return float(np.max(z - mold.f(x)))


def _angles(nodes):
    d = np.diff(nodes, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def _positions(p0, alpha, ell):
    steps = ell[:, None] * np.column_stack([np.cos(alpha), np.sin(alpha)])
    return np.vstack([p0, p0 + np.cumsum(steps, axis=0)])


def segment_normals(nodes: np.ndarray) -> np.ndarray:
    """Unit normals on the mold-facing side of each segment (for a chain
    running in +x this is -z)."""
    d = np.diff(nodes, axis=0)
    d = d / np.linalg.norm(d, axis=1)[:, None]
    return np.column_stack([d[:, 1], -d[:, 0]])


def nodal_pressure_forces(nodes: np.ndarray, pressure: float) -> np.ndarray:
    """Nodal forces per unit depth (N/m) from a pressure (Pa) normal to each
    segment, split equally to the segment end nodes. ``nodes`` in mm."""
    ell = np.linalg.norm(np.diff(nodes, axis=0), axis=1) * 1e-3
    fs = segment_normals(nodes) * (pressure * ell)[:, None]
    out = np.zeros_like(nodes)
    out[:-1] += 0.5 * fs
    out[1:] += 0.5 * fs
    return out


class _StepProblem:
    """One load step with frozen nodal forces.

    Design vector: ``[p0_x, p0_z]`` (only when the start is free) followed
    by the segment angles. Energy is scaled by ``escale`` J/m.
    """

    def __init__(self, ply: Ply2D, mat: MaterialParams, forces, ref_nodes, bending: str):
        self.ply = ply
        self.ell = ply.rest_lengths  # mm
        self.n = len(self.ell)
        self.p0_fixed = ply.nodes[0].copy()
        self.p_end = ply.nodes[-1].copy()
        self.free_start = ply.start == "free"
        self.forces = forces  # N/m per node
        self.ref = ref_nodes  # mm, positions at step start
        ell_m = self.ell * 1e-3
        node_len = np.zeros(self.n + 1)
        node_len[:-1] += 0.5 * ell_m
        node_len[1:] += 0.5 * ell_m
        self.weight = mat.rho * mat.t * node_len * mat.g  # N/m per node
        d_bend = mat.E * mat.t**3 / 12.0
        inner = 0.5 * (ell_m[:-1] + ell_m[1:])
        if bending == "nodal":
            self.kbend = np.full(self.n - 1, d_bend)
        elif bending == "continuum":
            self.kbend = d_bend / inner
        else:
            raise ValueError("bending must be 'nodal' or 'continuum'")
        self.escale = max(mat.P * (ply.length * 1e-3) ** 2, 1e-12)

    def unpack(self, v):
        if self.free_start:
            return v[:2], v[2:]
        return self.p0_fixed, v

    def pack(self, p0, alpha):
        return np.concatenate([p0, alpha]) if self.free_start else alpha.copy()

    def _dpos(self, alpha):
        """Per-segment derivative of a node step w.r.t. its angle, mm."""
        return self.ell[:, None] * np.column_stack([-np.sin(alpha), np.cos(alpha)])

    def _pull_back(self, gP, alpha):
        """Chain rule from node-position gradients (n+1, 2) to the design
        vector. Node i depends on angles k < i."""
        dstep = self._dpos(alpha)
        # sum over nodes i > k of gP[i]
        tail = np.cumsum(gP[::-1], axis=0)[::-1][1:]
        galpha = np.einsum("kj,kj->k", tail, dstep)
        if self.free_start:
            return np.concatenate([gP.sum(axis=0), galpha])
        return galpha

    def energy(self, v):
        p0, alpha = self.unpack(v)
        P = _positions(p0, alpha, self.ell)
        theta = np.diff(alpha)
        eb = 0.5 * np.sum(self.kbend * theta**2)
        gb = np.zeros(self.n)
        gb[1:] += self.kbend * theta
        gb[:-1] -= self.kbend * theta
        disp = (P - self.ref) * 1e-3
        ew = np.sum(self.weight * disp[:, 1]) - np.sum(self.forces * disp)
        gP = -self.forces * 1e-3
        gP[:, 1] += self.weight * 1e-3
        g = self._pull_back(gP, alpha)
        g[-self.n:] += gb
        return (eb + ew) / self.escale, g / self.escale

    def _ddpos(self, alpha):
        return -self.ell[:, None] * np.column_stack([np.cos(alpha), np.sin(alpha)])

    def _position_jacobian(self, alpha):
        """d(x_i)/dv and d(z_i)/dv as dense (n+1, nv) arrays."""
        dstep = self._dpos(alpha)
        lower = np.tril(np.ones((self.n + 1, self.n)), -1)
        Jx = lower * dstep[None, :, 0]
        Jz = lower * dstep[None, :, 1]
        if self.free_start:
            one = np.ones((self.n + 1, 1))
            zero = np.zeros((self.n + 1, 1))
            Jx = np.hstack([one, zero, Jx])
            Jz = np.hstack([zero, one, Jz])
        return Jx, Jz

    def _diag_pull(self, wP, alpha):
        """Diagonal second-derivative term sum_i wP_i . d2P_i/dalpha_k^2."""
        tail = np.cumsum(wP[::-1], axis=0)[::-1][1:]
        d = np.einsum("kj,kj->k", tail, self._ddpos(alpha))
        off = 2 if self.free_start else 0
        out = np.zeros(self.n + off)
        out[off:] = d
        return out

    def hess(self, v):
        _, alpha = self.unpack(v)
        off = 2 if self.free_start else 0
        H = np.zeros((v.size, v.size))
        k = self.kbend
        idx = np.arange(self.n - 1) + off
        H[idx, idx] += k
        H[idx + 1, idx + 1] += k
        H[idx, idx + 1] -= k
        H[idx + 1, idx] -= k
        gP = -self.forces * 1e-3
        gP[:, 1] += self.weight * 1e-3
        H[np.diag_indices(v.size)] += self._diag_pull(gP, alpha)
        return H / self.escale

    def eq_hess(self, v, w):
        _, alpha = self.unpack(v)
        wP = np.zeros((self.n + 1, 2))
        if self.ply.end == "fixed":
            wP[-1] = w[:2]
        return np.diag(self._diag_pull(wP, alpha)) / self._cscale

    def ineq_hess(self, v, w):
        p0, alpha = self.unpack(v)
        P = _positions(p0, alpha, self.ell)
        slope = self.ply.mold.df(P[:, 0])
        curv = self.ply.mold.curvature(P[:, 0])
        full = np.zeros(self.n + 1)
        full[self.contact_nodes] = w
        w = full
        wP = np.column_stack([w * slope, -w])
        H = np.diag(self._diag_pull(wP, alpha))
        if np.any(curv != 0):
            Jx, _ = self._position_jacobian(alpha)
            H += Jx.T @ ((w * curv)[:, None] * Jx)
        return H / self._cscale

    def eq(self, v):
        p0, alpha = self.unpack(v)
        rows = []
        vals = []
        if self.ply.end == "fixed":
            P = _positions(p0, alpha, self.ell)
            vals.append((P[-1] - self.p_end) / self._cscale)
            dstep = self._dpos(alpha)
            J = np.zeros((2, v.size))
            off = 2 if self.free_start else 0
            J[:, off:] = dstep.T
            if self.free_start:
                J[:, :2] = np.eye(2)
            rows.append(J / self._cscale)
        if self.free_start and self.ply.start == "fixed":
            pass
        if not vals:
            return np.zeros(0), np.zeros((0, v.size))
        return np.concatenate(vals), np.vstack(rows)

    @property
    def _cscale(self):
        return float(np.mean(self.ell))

    def ineq(self, v):
        p0, alpha = self.unpack(v)
        P = _positions(p0, alpha, self.ell)
        x, z = P[:, 0], P[:, 1]
        h = (self.ply.mold.f(x) - z) / self._cscale
        slope = self.ply.mold.df(x)
        dstep = self._dpos(alpha)
        n = self.n
        # dh_i/dalpha_k = slope_i * dx_k - dz_k for k < i
        lower = np.tril(np.ones((n + 1, n)), -1)
        J = (slope[:, None] * dstep[None, :, 0] - dstep[None, :, 1]) * lower
        if self.free_start:
            J = np.hstack([np.column_stack([slope, -np.ones(n + 1)]), J])
        rows = self.contact_nodes
        return h[rows], J[rows] / self._cscale

    @property
    def contact_nodes(self):
        """Nodes that carry a non-penetration constraint; fixed ends are
        excluded (constant or redundant with the end condition)."""
        lo = 0 if self.free_start else 1
        hi = self.n + 1 if self.ply.end == "free" else self.n
        return np.arange(lo, hi)


class _Reduced:
    """A step problem seen through a linear map ``v = S u``.

    With ``S`` the identity this is the full chain. The mirror map ties
    angle ``n-1-k`` to ``-angle k``, which keeps a symmetric chain
    symmetric; the vertical end condition and the contact rows of the
    second half are then implied and dropped.
    """

    def __init__(self, prob: _StepProblem, symmetric: bool):
        n = prob.n
        self.prob = prob
        nc = len(prob.contact_nodes)
        if symmetric:
            m = n // 2
            S = np.zeros((n, m))
            S[np.arange(m), np.arange(m)] = 1.0
            S[n - 1 - np.arange(m), np.arange(m)] = -1.0
            self.eq_rows = np.array([0]) if prob.ply.end == "fixed" else np.zeros(0, int)
            self.ineq_rows = np.arange(m)
        else:
            nv = n + (2 if prob.free_start else 0)
            S = np.eye(nv)
            self.eq_rows = np.arange(2) if prob.ply.end == "fixed" else np.zeros(0, int)
            self.ineq_rows = np.arange(nc)
        self.S = S
        self.n_contact = nc

    def full(self, u):
        return self.S @ u

    def energy(self, u):
        e, g = self.prob.energy(self.S @ u)
        return e, self.S.T @ g

    def hess(self, u):
        return self.S.T @ self.prob.hess(self.S @ u) @ self.S

    def eq(self, u):
        c, J = self.prob.eq(self.S @ u)
        if c.size == 0:
            return c, np.zeros((0, u.size))
        return c[self.eq_rows], (J @ self.S)[self.eq_rows]

    def ineq(self, u):
        c, J = self.prob.ineq(self.S @ u)
        return c[self.ineq_rows], (J @ self.S)[self.ineq_rows]

    def eq_hess(self, u, w):
        full = np.zeros(2)
        full[self.eq_rows] = w
        return self.S.T @ self.prob.eq_hess(self.S @ u, full) @ self.S

    def ineq_hess(self, u, w):
        full = np.zeros(self.n_contact)
        full[self.ineq_rows] = w
        return self.S.T @ self.prob.ineq_hess(self.S @ u, full) @ self.S


def is_mirror_symmetric(ply: Ply2D, tol: float = 1e-9) -> bool:
    """True if the chain is its own mirror image about the vertical line
    through its midpoint."""
    P = ply.nodes
    if len(P) % 2 == 0:
        return False
    xm = 0.5 * (P[0, 0] + P[-1, 0])
    Q = P[::-1].copy()
    Q[:, 0] = 2.0 * xm - Q[:, 0]
    return bool(np.allclose(P, Q, atol=tol * max(1.0, ply.length)))


def simulate_2d(
    ply: Ply2D,
    mat: MaterialParams,
    steps: int = 5,
    bending: str = "nodal",
    options: Optional[ALOptions] = None,
    pressure: Optional[float] = None,
    symmetric: bool = False,
) -> Wrinkle2DResult:
    """Load-stepped debulk of a 2D ply chain.

    Parameters
    ----------
    ply : Ply2D
        Initial chain, feasible above the mold.
    mat : MaterialParams
    steps : int
        Number of load steps; step ``s`` applies ``s * P / steps``.
    bending : {'nodal', 'continuum'}
        ``'nodal'`` uses ``0.5 * E t^3 / 12 * theta^2`` per node; ``'continuum'``
        divides by the segment length (unit-depth beam energy).
    pressure : float, optional
        Overrides ``mat.P``.
    symmetric : bool
        Solve for mirror-symmetric configurations only. Needs a symmetric
        chain with both ends fixed over a mold symmetric about the chain
        midpoint (not checked). Rules out the fin toppling to one side,
        which needs self-contact to be modelled properly.

    Returns
    -------
    Wrinkle2DResult
        Chain coordinates after each load step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if symmetric and not (ply.start == ply.end == "fixed" and is_mirror_symmetric(ply)):
        raise ValueError("symmetric solve needs a mirror-symmetric chain with fixed ends")
    opts = options or ALOptions(ctol=1e-10, gtol=1e-7, max_outer=60, max_inner=500)
    p_total = mat.P if pressure is None else pressure
    nodes = ply.nodes.copy()
    L0 = ply.length
    out, conv, energies, start_energies = [], [], [], []
    folded = False
    nfev = 0
    for s in range(1, steps + 1):
        p_s = p_total * s / steps
        forces = nodal_pressure_forces(nodes, p_s)
        work = Ply2D(nodes, start=ply.start, end=ply.end, mold=ply.mold)
        prob = _StepProblem(work, mat, forces, nodes.copy(), bending)
        prob.p_end = ply.nodes[-1].copy()
        prob.p0_fixed = ply.nodes[0].copy()
        prob.ell = ply.rest_lengths
        v0 = prob.pack(nodes[0], _angles(nodes))
        red = _Reduced(prob, symmetric)
        u0 = v0[: red.S.shape[1]] if symmetric else v0
        start_energies.append(red.energy(u0)[0] * prob.escale)
        eq = red.eq if red.eq_rows.size else None
        u1, n_ws = slsqp_warm_start(red.energy, u0, eq, red.ineq, maxiter=3000, ftol=1e-15)
        nfev += n_ws
        res = augmented_lagrangian(
            red.energy,
            u1,
            eq=red.eq,
            ineq=red.ineq,
            options=opts,
            hess=red.hess,
            eq_hess=red.eq_hess,
            ineq_hess=red.ineq_hess,
        )
        nfev += res.nfev
        p0, alpha = prob.unpack(red.full(res.x))
        nodes = _positions(p0, alpha, prob.ell)
        out.append(nodes.copy())
        conv.append(res.converged)
        energies.append(res.fun * prob.escale)
        if np.any(np.cos(alpha) <= 1e-9):
            folded = True
        logger.info("load step %d/%d: converged=%s nfev=%d", s, steps, res.converged, res.nfev)
    length = np.linalg.norm(np.diff(nodes, axis=0), axis=1).sum()
    return Wrinkle2DResult(out, conv, energies, folded, abs(length - L0) / L0, start_energies, nfev)


def tent_chain(delta: float = 9.3, apex: float = 3.2, n_segments: int = 200) -> Ply2D:
    """Two coarse segments of length ``delta`` with the middle node ``apex``
    above a flat mold, resampled into ``n_segments`` segments."""
    half = np.sqrt(delta**2 - apex**2)
    verts = [(-half, 0.0), (0.0, apex), (half, 0.0)]
    return Ply2D.from_polyline(verts, n_segments)
