"""Total potential energy of a ply net and its analytic gradient.

Configurations ``X`` are flat vectors ``[x1, y1, z1, ..., xN, yN, zN]`` in
metres. Nets store millimetres; convert with :func:`net_to_X`. ``z`` points
up, so the vacuum and gravity loads do positive work when nodes move down.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .net import FIXED, FREE, PlyNet

FRICTION_EPS = 1e-6  # m, smoothing of |d| at zero slip


@dataclass(frozen=True)
class MaterialParams:
    """Ply and load parameters in SI units.

    Defaults are the prepreg values used for the demonstrator part, a
    1 bar vacuum and a bulk factor of 1.2.
    """

    t: float = 0.3e-3
    E: float = 3.6e8
    G: float = 4.0e7
    rho: float = 1048.0
    mu: float = 0.4
    beta: float = 1.2
    P: float = 1.0e5
    g: float = 9.81

    def __post_init__(self):
        for name in ("t", "E", "G", "rho", "P", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")

    @property
    def bending_stiffness(self) -> float:
        return self.E * self.t**3 / 12.0

    @property
    def consolidated_thickness(self) -> float:
        return self.t / self.beta


def net_to_X(net: PlyNet) -> np.ndarray:
    return net.nodes.ravel() * 1e-3


def _angle_terms(a, b):
    """Angle between vector rows ``a`` and ``b`` with the pieces needed for
    gradients: ``theta, ahat, bhat, |a|, |b|, cos, theta/sin``."""
    la = np.linalg.norm(a, axis=1)
    lb = np.linalg.norm(b, axis=1)
    if np.any(la == 0) or np.any(lb == 0):
        raise ValueError("degenerate segment")
    ah = a / la[:, None]
    bh = b / lb[:, None]
    cross = np.linalg.norm(np.cross(ah, bh), axis=1)
    cos = np.einsum("ij,ij->i", ah, bh)
    theta = np.arctan2(cross, cos)
    sin = np.sin(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sin > 1e-12, theta / sin, 1.0)
    return theta, ah, bh, la, lb, cos, ratio


def _dtheta2(ah, bh, la, cos, ratio):
    """Gradient of ``theta**2`` w.r.t. ``a`` (swap roles for ``b``)."""
    return (-2.0 * ratio)[:, None] * (bh - cos[:, None] * ah) / la[:, None]


def _bend_term(a, b, D):
    """Energy ``0.5 D theta^2`` of the angle between ``a`` and ``b`` and its
    gradients with respect to ``a`` and ``b``."""
    theta, ah, bh, la, lb, cos, ratio = _angle_terms(a, b)
    ga = 0.5 * D * _dtheta2(ah, bh, la, cos, ratio)
    gb = 0.5 * D * _dtheta2(bh, ah, lb, cos, ratio)
    return 0.5 * D * theta**2, ga, gb


def _bend_triples(net: PlyNet):
    """``(prev, node, next)`` index triples along both fiber families."""
    nb = net.neighbors
    out = []
    for fwd, back in ((0, 2), (1, 3)):
        k = np.flatnonzero((nb[:, fwd] >= 0) & (nb[:, back] >= 0))
        out.append(np.column_stack([nb[k, back], k, nb[k, fwd]]))
    return np.vstack(out)


def bend_energy(net: PlyNet, X: np.ndarray, mat: MaterialParams, per_node: bool = False):
    """Out-of-plane bending of both fiber families.

    Each node with two collinear neighbors along a family stores
    ``0.5 * E t^3 / 12 * theta^2``, ``theta`` being the angle between the
    incoming and outgoing segment (twice the half-angle ``psi``).
    """
    P = np.asarray(X, dtype=float).reshape(-1, 3)
    grad = np.zeros_like(P)
    node_e = np.zeros(len(P))
    tri = _bend_triples(net)
    if len(tri):
        p, k, q = tri.T
        e, ga, gb = _bend_term(P[k] - P[p], P[q] - P[k], mat.bending_stiffness)
        np.add.at(node_e, k, e)
        np.add.at(grad, p, -ga)
        np.add.at(grad, k, ga - gb)
        np.add.at(grad, q, gb)
    if per_node:
        return node_e
    return float(node_e.sum()), grad.ravel()


_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))


def _shear_term(u, v, K):
    """Energy ``K (pi/2 - phi)^2`` of the corner between ``u`` and ``v`` and
    its gradients."""
    phi, uh, vh, lu, lv, cos, _ = _angle_terms(u, v)
    sin = np.sin(phi)
    if np.any(sin < 1e-12):
        raise ValueError("degenerate segment: collapsed fiber corner")
    gamma = 0.5 * np.pi - phi
    # dU/dphi = -2 K gamma; dphi/du = -(vh - cos uh) / (|u| sin)
    coef = (2.0 * K * gamma / sin)[:, None]
    gu = coef * (vh - cos[:, None] * uh) / lu[:, None]
    gv = coef * (uh - cos[:, None] * vh) / lv[:, None]
    return K * gamma**2, gu, gv


def _shear_triples(net: PlyNet):
    """``(node, arm1, arm2)`` for every fiber corner."""
    nb = net.neighbors
    out = []
    for s1, s2 in _CORNERS:
        k = np.flatnonzero((nb[:, s1] >= 0) & (nb[:, s2] >= 0))
        out.append(np.column_stack([k, nb[k, s1], nb[k, s2]]))
    return np.vstack(out)


def _shear_constant(net: PlyNet, mat: MaterialParams) -> float:
    half = 0.5 * net.delta * 1e-3
    return 0.5 * mat.G * half**2 * mat.t


def shear_energy(net: PlyNet, X: np.ndarray, mat: MaterialParams, per_node: bool = False):
    """In-plane shear at up to four fiber corners per node:
    ``0.5 * G * (delta/2)^2 * t * (pi/2 - phi)^2`` each."""
    P = np.asarray(X, dtype=float).reshape(-1, 3)
    grad = np.zeros_like(P)
    node_e = np.zeros(len(P))
    tri = _shear_triples(net)
    if len(tri):
        k, m1, m2 = tri.T
        e, gu, gv = _shear_term(P[m1] - P[k], P[m2] - P[k], _shear_constant(net, mat))
        np.add.at(node_e, k, e)
        np.add.at(grad, m1, gu)
        np.add.at(grad, m2, gv)
        np.add.at(grad, k, -gu - gv)
    if per_node:
        return node_e
    return float(node_e.sum()), grad.ravel()


def nodal_loads(net: PlyNet, mat: MaterialParams) -> tuple[float, float]:
    """Equivalent nodal vacuum force and nodal weight, both in N."""
    area = net.patch_area / net.n_nodes
    return mat.P * area, area * mat.t * mat.rho * mat.g


def external_energies(net: PlyNet, X: np.ndarray, X_ini: np.ndarray, mat: MaterialParams, per_node: bool = False):
    """Gravity, vacuum and friction energies.

    Gravity and vacuum act on every non-fixed node through its downward
    movement ``z_ini - z``. Friction acts on free boundary nodes through
    the smoothed 3D slip magnitude.

    Returns
    -------
    (grav, vac, fric, (g_grav, g_vac, g_fric))
        With ``per_node=True`` the three per-node arrays instead.
    """
    P = np.asarray(X, dtype=float).reshape(-1, 3)
    P0 = np.asarray(X_ini, dtype=float).reshape(-1, 3)
    f_vac, f_grav = nodal_loads(net, mat)
    loaded = net.node_class != FIXED
    down = np.where(loaded, P0[:, 2] - P[:, 2], 0.0)
    e_grav = f_grav * down
    e_vac = f_vac * down
    free = net.node_class == FREE
    d = P - P0
    slip = np.sqrt(np.einsum("ij,ij->i", d, d) + FRICTION_EPS**2)
    e_fric = np.where(free, mat.mu * f_vac * (slip - FRICTION_EPS), 0.0)
    if per_node:
        return e_grav, e_vac, e_fric
    g_grav = np.zeros_like(P)
    g_vac = np.zeros_like(P)
    g_grav[loaded, 2] = -f_grav
    g_vac[loaded, 2] = -f_vac
    g_fric = np.where(free[:, None], mat.mu * f_vac * d / slip[:, None], 0.0)
    return float(e_grav.sum()), float(e_vac.sum()), float(e_fric.sum()), (g_grav.ravel(), g_vac.ravel(), g_fric.ravel())


def total_potential(net: PlyNet, X: np.ndarray, X_ini: np.ndarray, mat: MaterialParams):
    """``Pi = bend + shear + friction - gravity - vacuum`` and its gradient.

    Gradient entries of fixed boundary nodes are zero; those coordinates
    are not design variables.
    """
    eb, gb = bend_energy(net, X, mat)
    es, gs = shear_energy(net, X, mat)
    eg, ev, ef, (gg, gv, gf) = external_energies(net, X, X_ini, mat)
    pi = eb + es + ef - eg - ev
    grad = (gb + gs + gf - gg - gv).reshape(-1, 3)
    grad[net.node_class == FIXED] = 0.0
    return pi, grad.ravel()


def energy_breakdown(net: PlyNet, X, X_ini, mat: MaterialParams) -> dict:
    """Per-node energy terms in J, keyed by term name."""
    eg, ev, ef = external_energies(net, X, X_ini, mat, per_node=True)
    return {
        "bend": bend_energy(net, X, mat, per_node=True),
        "shear": shear_energy(net, X, mat, per_node=True),
        "friction": ef,
        "gravity": eg,
        "vacuum": ev,
    }


def write_energy_table(path, net: PlyNet, X, X_ini, mat: MaterialParams) -> None:
    """Debug dump: one CSV row per node with every energy term."""
    terms = energy_breakdown(net, X, X_ini, mat)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "class", *terms.keys()])
        for k in range(net.n_nodes):
            w.writerow([k, int(net.node_class[k]), *(f"{terms[name][k]:.9e}" for name in terms)])


def _term_hessians(term, a, b, K):
    """Per-term ``(m, 6, 6)`` Hessians w.r.t. ``(a, b)`` by central
    differences of the analytic term gradient."""
    ab = np.hstack([a, b])
    h = 1e-6 * np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    H = np.empty((len(ab), 6, 6))
    for c in range(6):
        step = np.zeros_like(ab)
        step[:, c] = h
        _, ga1, gb1 = term((ab + step)[:, :3], (ab + step)[:, 3:], K)
        _, ga0, gb0 = term((ab - step)[:, :3], (ab - step)[:, 3:], K)
        H[:, :, c] = np.hstack([ga1 - ga0, gb1 - gb0]) / (2 * h[:, None])
    return 0.5 * (H + H.transpose(0, 2, 1))


# d(a, b) / d(node triple) for the two term layouts
_BEND_MAP = np.array([[-1, 1, 0], [0, -1, 1]], dtype=float)  # a = k - p, b = q - k
_SHEAR_MAP = np.array([[-1, 1, 0], [-1, 0, 1]], dtype=float)  # u = m1 - k, v = m2 - k


def _scatter(H, tri, Hab, M):
    # node blocks: Hn[r, s] = sum_ij M[i, r] M[j, s] Hab[i, j]
    Hab = Hab.reshape(-1, 2, 3, 2, 3)
    Hn = np.einsum("ir,js,mixjy->mrxsy", M, M, Hab)
    idx = 3 * tri[:, :, None] + np.arange(3)  # (m, 3 nodes, 3 coords)
    rows = np.broadcast_to(idx[:, :, :, None, None], Hn.shape)
    cols = np.broadcast_to(idx[:, None, None, :, :], Hn.shape)
    np.add.at(H, (rows.ravel(), cols.ravel()), Hn.ravel())


def potential_hessian(net: PlyNet, X: np.ndarray, X_ini: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """Dense Hessian of the total potential, ``(3N, 3N)`` in J/m^2.

    Bending and shear blocks come from differenced term gradients,
    friction is analytic and the load terms are linear. Rows and columns of
    fixed boundary nodes are zero.
    """
    P = np.asarray(X, dtype=float).reshape(-1, 3)
    N = len(P)
    H = np.zeros((3 * N, 3 * N))
    tri = _bend_triples(net)
    if len(tri):
        p, k, q = tri.T
        _scatter(H, tri, _term_hessians(_bend_term, P[k] - P[p], P[q] - P[k], mat.bending_stiffness), _BEND_MAP)
    tri = _shear_triples(net)
    if len(tri):
        k, m1, m2 = tri.T
        _scatter(H, tri, _term_hessians(_shear_term, P[m1] - P[k], P[m2] - P[k], _shear_constant(net, mat)), _SHEAR_MAP)
    free = np.flatnonzero(net.node_class == FREE)
    if free.size:
        f_vac, _ = nodal_loads(net, mat)
        d = P[free] - np.asarray(X_ini, dtype=float).reshape(-1, 3)[free]
        s = np.sqrt(np.einsum("ij,ij->i", d, d) + FRICTION_EPS**2)
        blk = mat.mu * f_vac * (np.eye(3)[None] / s[:, None, None] - d[:, :, None] * d[:, None, :] / s[:, None, None] ** 3)
        for a in range(3):
            for b in range(3):
                H[3 * free + a, 3 * free + b] += blk[:, a, b]
    fixed = np.flatnonzero(net.node_class == FIXED)
    if fixed.size:
        cols = (3 * fixed[:, None] + np.arange(3)).ravel()
        H[cols, :] = 0.0
        H[:, cols] = 0.0
    return H
