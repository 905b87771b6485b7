"""Constrained minimization of the ply net potential.

Fiber segments are inextensible (equalities) and nodes may not penetrate the
reference surface (inequalities). Fixed boundary nodes are not design
variables. The design vector is the displacement of the free coordinates,
scaled by the node spacing; energy is scaled by the work of one nodal
vacuum force over one node spacing.

Each load step starts with an SLSQP pass. If the result does not pass the
first-order check (least-squares multipliers, non-negative on the active
contacts), an augmented Lagrangian run continues from it with those
multipliers.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .auglag import ALOptions, augmented_lagrangian, kkt_residual, slsqp_warm_start
from .energy import MaterialParams, nodal_loads, net_to_X, potential_hessian, total_potential
from .net import FIXED, PlyNet
from .surface import GridSurface

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    max_iterations: int = 40
    constraint_tol: float = 1e-6  # m, both families
    stationarity_tol: float = 1e-5  # scaled Lagrangian gradient
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e10
    max_inner: int = 500
    load_steps: int = 1
    warm_start: bool = True  # SLSQP pass before the augmented Lagrangian
    warm_start_iterations: int = 500

    def __post_init__(self):
        if self.constraint_tol <= 0 or self.stationarity_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1 or self.load_steps < 1:
            raise ValueError("max_iterations and load_steps must be >= 1")


@dataclass
class SolveResult:
    X_final: np.ndarray  # m, flat
    X_ini: np.ndarray  # m, flat (after any feasibility lift)
    pi_final: float
    pi_initial: float
    iterations: int
    function_evaluations: int
    max_equality_residual: float  # m
    max_penetration: float  # m
    stationarity: float
    converged: bool
    wall_time: float
    trace: list = field(default_factory=list)
    lifted: bool = False

    @property
    def nodes(self) -> np.ndarray:
        """Final node coordinates in mm, shape (N, 3)."""
        return self.X_final.reshape(-1, 3) * 1e3

    def to_dict(self) -> dict:
        return {
            "nodes_mm": self.nodes.tolist(),
            "pi_final_J": self.pi_final,
            "pi_initial_J": self.pi_initial,
            "iterations": self.iterations,
            "function_evaluations": self.function_evaluations,
            "max_equality_residual_m": self.max_equality_residual,
            "max_penetration_m": self.max_penetration,
            "stationarity": self.stationarity,
            "converged": self.converged,
            "wall_time_s": self.wall_time,
            "lifted": self.lifted,
        }


def constraint_residuals(net: PlyNet, X: np.ndarray, ref: GridSurface) -> tuple[float, float]:
    """Max inextensibility residual and max penetration, both in m, over all
    edges and all nodes."""
    P = np.asarray(X).reshape(-1, 3)
    e = net.edges
    eq = np.abs(np.linalg.norm(P[e[:, 0]] - P[e[:, 1]], axis=1) - net.delta * 1e-3) if len(e) else np.zeros(0)
    pen = ref.evaluate(P[:, 0] * 1e3, P[:, 1] * 1e3) * 1e-3 - P[:, 2]
    return (float(eq.max()) if eq.size else 0.0), float(max(pen.max(), 0.0))


class NetProblem:
    """Scaled optimization problem for one net."""

    def __init__(self, net: PlyNet, mat: MaterialParams, ref: GridSurface, X_ini: np.ndarray, frozen=None):
        self.net = net
        self.mat = mat
        self.ref = ref
        self.X_ini = X_ini
        self.scale = net.delta * 1e-3
        f_vac, _ = nodal_loads(net, mat)
        self.escale = f_vac * self.scale
        N = net.n_nodes
        dof = np.ones((N, 3), dtype=bool)
        dof[net.node_class == FIXED] = False
        if frozen is not None:
            dof &= ~np.asarray(frozen, dtype=bool).reshape(N, 3)
        self.dof = dof.ravel()
        self.idx = np.flatnonzero(self.dof)
        movable = dof.any(axis=1)
        e = net.edges
        self.edges = e[movable[e[:, 0]] | movable[e[:, 1]]] if len(e) else e
        self.contact = np.flatnonzero(dof[:, 2] | dof[:, 0] | dof[:, 1])
        col = np.full(3 * N, -1)
        col[self.idx] = np.arange(self.idx.size)
        self.col = col.reshape(N, 3)

    def X(self, u):
        X = self.X_ini.copy()
        X[self.idx] += u * self.scale
        return X

    def u(self, X):
        return (np.asarray(X)[self.idx] - self.X_ini[self.idx]) / self.scale

    def objective(self, u):
        pi, g = total_potential(self.net, self.X(u), self.X_ini, self.mat)
        return pi / self.escale, g[self.idx] * self.scale / self.escale

    def hessian(self, u):
        H = potential_hessian(self.net, self.X(u), self.X_ini, self.mat)
        return H[np.ix_(self.idx, self.idx)] * self.scale**2 / self.escale

    def eq_hess(self, u, w):
        P = self.X(u).reshape(-1, 3)
        e = self.edges
        d = P[e[:, 0]] - P[e[:, 1]]
        L = np.linalg.norm(d, axis=1)
        unit = d / L[:, None]
        blocks = (w * self.scale / L)[:, None, None] * (np.eye(3)[None] - unit[:, :, None] * unit[:, None, :])
        n = self.idx.size
        H = np.zeros((n, n))
        ca, cb = self.col[e[:, 0]], self.col[e[:, 1]]
        for p_, q_, sign in ((ca, ca, 1.0), (cb, cb, 1.0), (ca, cb, -1.0), (cb, ca, -1.0)):
            r = np.broadcast_to(p_[:, :, None], blocks.shape)
            c = np.broadcast_to(q_[:, None, :], blocks.shape)
            ok = (r >= 0) & (c >= 0)
            np.add.at(H, (r[ok], c[ok]), sign * blocks[ok])
        return H

    def ineq_hess(self, u, w):
        P = self.X(u).reshape(-1, 3)
        k = self.contact
        fxy = self.ref.cross_derivative(P[k, 0] * 1e3, P[k, 1] * 1e3) * 1e3 * self.scale * w
        n = self.idx.size
        H = np.zeros((n, n))
        cx, cy = self.col[k, 0], self.col[k, 1]
        ok = (cx >= 0) & (cy >= 0) & (fxy != 0)
        H[cx[ok], cy[ok]] += fxy[ok]
        H[cy[ok], cx[ok]] += fxy[ok]
        return H

    def _sparse(self, rows, nodes, vals, nrows):
        """Assemble a sparse Jacobian from per-row node-coordinate blocks,
        dropping non-design coordinates."""
        cols = self.col[nodes]  # (m, k, 3)
        r = np.broadcast_to(rows[:, None, None], cols.shape)
        keep = cols >= 0
        return sp.csr_matrix((vals[keep], (r[keep], cols[keep])), shape=(nrows, self.idx.size))

    def equality(self, u):
        P = self.X(u).reshape(-1, 3)
        e = self.edges
        d = P[e[:, 0]] - P[e[:, 1]]
        L = np.linalg.norm(d, axis=1)
        c = (L - self.scale) / self.scale
        unit = d / L[:, None]
        m = len(e)
        vals = np.stack([unit, -unit], axis=1)  # d c / d X, then chain with dX/du = scale
        J = self._sparse(np.arange(m), e, vals, m)
        return c, J

    def inequality(self, u):
        P = self.X(u).reshape(-1, 3)
        k = self.contact
        xs, ys = P[k, 0] * 1e3, P[k, 1] * 1e3
        F, gx, gy = self.ref.evaluate_with_gradient(xs, ys)
        h = (F * 1e-3 - P[k, 2]) / self.scale
        # F in mm of x in mm: dF(m)/dx(m) equals the mm slope
        vals = np.stack([gx, gy, -np.ones_like(gx)], axis=1)[:, None, :]
        J = self._sparse(np.arange(len(k)), k[:, None], vals, len(k))
        return h, J


def _scaled_violation(prob: NetProblem, u) -> tuple[float, float]:
    c, _ = prob.equality(u)
    h, _ = prob.inequality(u)
    return float(np.max(np.abs(c), initial=0.0)), float(np.max(np.maximum(h, 0.0), initial=0.0))


def _merit_key(prob: NetProblem, u, stat: float, ctol: float):
    """Ordering of candidate end points: feasible before infeasible, then
    by stationarity, then by energy."""
    v = max(_scaled_violation(prob, u))
    return (v > ctol, v if v > ctol else 0.0, stat, prob.objective(u)[0])


def _lift_feasible(net: PlyNet, X: np.ndarray, ref: GridSurface, tol: float):
    P = X.reshape(-1, 3).copy()
    F = ref.evaluate(P[:, 0] * 1e3, P[:, 1] * 1e3) * 1e-3
    low = (P[:, 2] < F - tol) & (net.node_class != FIXED)
    if low.any():
        P[low, 2] = F[low]
    return P.ravel(), bool(low.any())


def solve(
    net: PlyNet,
    mat: MaterialParams,
    ref: GridSurface,
    cfg: Optional[SolverConfig] = None,
    frozen: Optional[np.ndarray] = None,
    log_path=None,
) -> SolveResult:
    """Minimize the net potential from its meshed configuration.

    Parameters
    ----------
    net : PlyNet
        Classified net; its node coordinates are the initial configuration.
    mat : MaterialParams
    ref : GridSurface
        Reference (mold) surface in mm.
    cfg : SolverConfig, optional
    frozen : array of bool, optional
        ``(N, 3)`` mask of extra coordinates to hold fixed (planar tests).
    log_path : path, optional
        Appends the per-iteration solver trace as text.

    Returns
    -------
    SolveResult
        On non-convergence the best iterate is returned with
        ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    X0, lifted = _lift_feasible(net, net_to_X(net), ref, cfg.constraint_tol)
    if lifted:
        warnings.warn("initial configuration penetrated the reference surface; lifted in z", RuntimeWarning)
    prob = NetProblem(net, mat, ref, X0, frozen)
    pi0 = total_potential(net, X0, X0, mat)[0]
    if prob.idx.size == 0:
        eqr, pen = constraint_residuals(net, X0, ref)
        return SolveResult(X0, X0, pi0, pi0, 0, 0, eqr, pen, 0.0, True, time.perf_counter() - t0, [], lifted)

    trace = []
    logfh = open(log_path, "a") if log_path else None
    u = np.zeros(prob.idx.size)
    nfev = outer = 0
    stat = np.inf

    def log(entry):
        trace.append(entry)
        if logfh:
            logfh.write(" ".join(f"{k}={v:.6e}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()) + "\n")

    try:
        # vacuum ramped over the load steps, each warm-started from the last
        for step in range(1, cfg.load_steps + 1):
            mat_s = replace(mat, P=mat.P * step / cfg.load_steps)
            prob = NetProblem(net, mat_s, ref, X0, frozen)
            ctol = 0.01 * cfg.constraint_tol / prob.scale
            act_tol = cfg.constraint_tol / prob.scale
            if cfg.warm_start:
                u, n_ws = slsqp_warm_start(prob.objective, u, prob.equality, prob.inequality, cfg.warm_start_iterations)
                nfev += n_ws
            stat, lam, mu = kkt_residual(prob.objective, prob.equality, prob.inequality, u, act_tol)
            ce, hi = _scaled_violation(prob, u)
            log({"step": step, "stage": "warm", "pi": prob.objective(u)[0] * prob.escale, "eq": ce, "ineq": hi, "stat": stat, "nfev": nfev})
            if max(ce, hi) <= ctol and stat <= cfg.stationarity_tol:
                continue
            opts = ALOptions(
                max_outer=cfg.max_iterations,
                max_inner=cfg.max_inner,
                ctol=ctol,
                gtol=cfg.stationarity_tol,
                rho0=cfg.rho0,
                rho_growth=cfg.rho_growth,
                rho_max=cfg.rho_max,
            )

            def cb(entry, prob=prob, step=step, base=nfev):
                log({"step": step, "stage": "al", "outer": entry["outer"], "pi": entry["f"] * prob.escale, "eq": entry["eq"],
                     "ineq": entry["ineq"], "stat": entry["stat"], "rho": entry["rho"], "nfev": base + entry["nfev"]})

            warm = cfg.warm_start
            res = augmented_lagrangian(
                prob.objective,
                u,
                prob.equality,
                prob.inequality,
                opts,
                cb,
                hess=prob.hessian,
                eq_hess=prob.eq_hess,
                ineq_hess=prob.ineq_hess,
                lam0=lam if warm else None,
                mu0=mu if warm else None,
            )
            nfev += res.nfev
            outer += res.outer_iterations
            u_al = res.x
            stat_al = kkt_residual(prob.objective, prob.equality, prob.inequality, u_al, act_tol)[0]
            # keep whichever end point is the better certified one
            if _merit_key(prob, u_al, stat_al, ctol) <= _merit_key(prob, u, stat, ctol):
                u, stat = u_al, stat_al
    finally:
        if logfh:
            logfh.close()
    X = prob.X(u)
    pi = total_potential(net, X, X0, mat)[0]
    eqr, pen = constraint_residuals(net, X, ref)
    converged = stat <= cfg.stationarity_tol and eqr <= cfg.constraint_tol and pen <= cfg.constraint_tol
    if pi > pi0 + 1e-12 * max(1.0, abs(pi0)):
        converged = False
    logger.info("solve: N=%d nfev=%d pi=%.4e eq=%.1e pen=%.1e stat=%.1e converged=%s", net.n_nodes, nfev, pi, eqr, pen, stat, converged)
    return SolveResult(
        X_final=X,
        X_ini=X0,
        pi_final=pi,
        pi_initial=pi0,
        iterations=outer,
        function_evaluations=nfev,
        max_equality_residual=eqr,
        max_penetration=pen,
        stationarity=float(stat),
        converged=bool(converged),
        wall_time=time.perf_counter() - t0,
        trace=trace,
        lifted=lifted,
    )
