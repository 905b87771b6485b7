"""Augmented Lagrangian minimizer for smooth problems with equality and
inequality constraints.

The problem is::

    minimize    f(x)
    subject to  c(x) = 0
                h(x) <= 0

Inequalities use the Rockafellar (squared-slack free) augmentation. The
inner unconstrained problems are solved with a trust-region Newton method
when second derivatives are supplied and with L-BFGS-B otherwise. If the
outer loop ends short of feasibility a safeguarded Gauss-Newton
restoration tries to close the gap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp

logger = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], tuple[float, np.ndarray]]
ConstraintFn = Callable[[np.ndarray], tuple[np.ndarray, "sp.spmatrix | np.ndarray"]]


@dataclass
class ALOptions:
    max_outer: int = 40
    max_inner: int = 400
    ctol: float = 1e-8
    gtol: float = 1e-6
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e10
    restore_iters: int = 30
    # an inequality within this distance of zero is kept active during restoration
    active_tol: float = 1e-7
    # trust-region method for the inner solves when a Hessian is given
    inner_method: str = "trust-exact"

    def __post_init__(self):
        if self.inner_method not in ("trust-exact", "trust-krylov"):
            raise ValueError("inner_method must be 'trust-exact' or 'trust-krylov'")


@dataclass
class ALResult:
    x: np.ndarray
    fun: float
    eq_residual: float
    ineq_violation: float
    stationarity: float
    outer_iterations: int
    nfev: int
    converged: bool
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    trace: list = field(default_factory=list)


def _empty(n):
    return np.zeros(0), sp.csr_matrix((0, n))


def _as_sparse(J, n):
    if sp.issparse(J):
        return J.tocsr()
    return sp.csr_matrix(np.asarray(J, dtype=float).reshape(-1, n))


def augmented_lagrangian(
    fun: ObjectiveFn,
    x0: np.ndarray,
    eq: Optional[ConstraintFn] = None,
    ineq: Optional[ConstraintFn] = None,
    options: Optional[ALOptions] = None,
    callback: Optional[Callable[[dict], None]] = None,
    hess: Optional[Callable] = None,
    eq_hess: Optional[Callable] = None,
    ineq_hess: Optional[Callable] = None,
    lam0: Optional[np.ndarray] = None,
    mu0: Optional[np.ndarray] = None,
) -> ALResult:
    """Minimize ``fun`` subject to ``eq(x) == 0`` and ``ineq(x) <= 0``.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> (f, grad)``.
    x0 : ndarray
        Starting point. Need not be feasible.
    eq, ineq : callable, optional
        ``g(x) -> (values, jacobian)``; the Jacobian may be dense or sparse.
    options : ALOptions, optional
    callback : callable, optional
        Called with a dict ``{outer, f, eq, ineq, rho, nfev}`` after every
        outer iteration.
    hess, eq_hess, ineq_hess : callable, optional
        Dense second derivatives: ``hess(x)`` of the objective and
        ``eq_hess(x, w)`` / ``ineq_hess(x, w)`` of ``w @ g(x)``. When ``hess``
        is given the inner problems use a trust-region Newton method instead
        of L-BFGS-B; missing constraint Hessians are treated as zero.
    lam0, mu0 : ndarray, optional
        Initial multipliers (default zero), e.g. from :func:`kkt_residual`
        at a warm start.

    Returns
    -------
    ALResult
        ``converged`` is true when the final residuals are below ``ctol`` and
        the Lagrangian gradient max-norm is below ``gtol``.
    """
    opts = options or ALOptions()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    eqf = eq or (lambda _x: _empty(n))
    inf = ineq or (lambda _x: _empty(n))

    c0, _ = eqf(x)
    h0, _ = inf(x)
    lam = np.zeros(len(c0)) if lam0 is None else np.array(lam0, dtype=float)
    mu = np.zeros(len(h0)) if mu0 is None else np.maximum(np.array(mu0, dtype=float), 0.0)
    rho = opts.rho0
    nfev = 0
    trace = []

    def merit(z):
        nonlocal nfev
        nfev += 1
        f, g = fun(z)
        c, Jc = eqf(z)
        h, Jh = inf(z)
        val = f
        grad = np.array(g, dtype=float)
        if c.size:
            Jc = _as_sparse(Jc, n)
            val += lam @ c + 0.5 * rho * (c @ c)
            grad += Jc.T @ (lam + rho * c)
        if h.size:
            Jh = _as_sparse(Jh, n)
            s = np.maximum(0.0, mu + rho * h)
            val += (s @ s - mu @ mu) / (2.0 * rho)
            grad += Jh.T @ s
        return val, grad

    def violation(z):
        c, _ = eqf(z)
        h, _ = inf(z)
        ce = np.max(np.abs(c)) if c.size else 0.0
        hi = np.max(np.maximum(h, 0.0)) if h.size else 0.0
        return ce, hi

    def merit_hess(z):
        H = np.array(hess(z), dtype=float)
        c, Jc = eqf(z)
        h, Jh = inf(z)
        if c.size:
            Jd = _as_sparse(Jc, n).toarray()
            H += rho * Jd.T @ Jd
            if eq_hess is not None:
                H += eq_hess(z, lam + rho * c)
        if h.size:
            s = np.maximum(0.0, mu + rho * h)
            act = s > 0
            if act.any():
                Ja = _as_sparse(Jh, n)[np.flatnonzero(act)].toarray()
                H += rho * Ja.T @ Ja
                if ineq_hess is not None:
                    H += ineq_hess(z, s)
        return H

    prev_viol = np.inf
    inner_gtol = 1e-2
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        lbfgs = {"maxiter": opts.max_inner, "gtol": inner_gtol, "ftol": 1e-15, "maxcor": 20}
        if hess is None:
            res = scipy.optimize.minimize(merit, x, jac=True, method="L-BFGS-B", options=lbfgs)
        else:
            try:
                with np.errstate(invalid="ignore"):
                    res = scipy.optimize.minimize(
                        merit,
                        x,
                        jac=True,
                        hess=merit_hess,
                        method=opts.inner_method,
                        options={"maxiter": opts.max_inner, "gtol": inner_gtol},
                    )
                if not np.all(np.isfinite(res.x)):
                    raise ValueError("non-finite iterate")
            except (ValueError, np.linalg.LinAlgError) as exc:
                # the exact subproblem solver can break down on badly scaled merit Hessians
                logger.debug("outer %d: %s failed (%s), falling back to L-BFGS-B", outer, opts.inner_method, exc)
                res = scipy.optimize.minimize(merit, x, jac=True, method="L-BFGS-B", options=lbfgs)
        x = res.x
        c, _ = eqf(x)
        h, _ = inf(x)
        ce, hi = violation(x)
        viol = max(ce, hi)
        if c.size:
            lam = lam + rho * c
        if h.size:
            mu = np.maximum(0.0, mu + rho * h)
        stat = _stationarity(fun, eqf, inf, x, lam, mu, n)
        f = fun(x)[0]
        entry = {"outer": outer, "f": f, "eq": ce, "ineq": hi, "rho": rho, "nfev": nfev, "stat": stat}
        trace.append(entry)
        logger.debug("outer %d f=%.6e eq=%.2e ineq=%.2e rho=%.1e stat=%.2e", outer, f, ce, hi, rho, stat)
        if callback is not None:
            callback(entry)
        if viol <= opts.ctol and stat <= opts.gtol:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * opts.rho_growth, opts.rho_max)
        prev_viol = viol
        inner_gtol = max(inner_gtol * 0.1, 0.1 * opts.gtol)

    ce, hi = violation(x)
    if max(ce, hi) > opts.ctol:
        x = restore_feasibility(x, eqf, inf, opts)
        ce, hi = violation(x)
    stat = _stationarity(fun, eqf, inf, x, lam, mu, n)
    f = fun(x)[0]
    converged = ce <= opts.ctol and hi <= opts.ctol and stat <= opts.gtol
    return ALResult(
        x=x,
        fun=f,
        eq_residual=ce,
        ineq_violation=hi,
        stationarity=stat,
        outer_iterations=outer,
        nfev=nfev,
        converged=bool(converged),
        lam_eq=lam,
        lam_ineq=mu,
        trace=trace,
    )


def _stationarity(fun, eqf, inf, x, lam, mu, n):
    _, g = fun(x)
    g = np.array(g, dtype=float)
    c, Jc = eqf(x)
    h, Jh = inf(x)
    if c.size:
        g += _as_sparse(Jc, n).T @ lam
    if h.size:
        g += _as_sparse(Jh, n).T @ mu
    return float(np.max(np.abs(g))) if g.size else 0.0


def restore_feasibility(x, eqf, inf, opts: ALOptions):
    """Gauss-Newton correction onto the equality set and the violated or
    active inequalities. Steps are halved until the violation drops; the
    least violating point seen is returned."""
    n = x.size

    def viol(z):
        c, _ = eqf(z)
        h, _ = inf(z)
        return max(np.max(np.abs(c), initial=0.0), np.max(np.maximum(h, 0.0), initial=0.0))

    x = x.copy()
    v = viol(x)
    for _ in range(opts.restore_iters):
        c, Jc = eqf(x)
        h, Jh = inf(x)
        active = h > -opts.active_tol if h.size else np.zeros(0, dtype=bool)
        # violated inequalities are pulled back to zero, active ones held there
        target = np.where(h[active] > 0, h[active], 0.0) if h.size else np.zeros(0)
        rows = []
        rhs = []
        if c.size:
            rows.append(_as_sparse(Jc, n))
            rhs.append(c)
        if active.any():
            rows.append(_as_sparse(Jh, n)[np.flatnonzero(active)])
            rhs.append(target)
        if not rows or v < 1e-14:
            break
        J = sp.vstack(rows).toarray()
        dx = scipy.linalg.lstsq(J, -np.concatenate(rhs), cond=1e-10, lapack_driver="gelsd")[0]
        step = 1.0
        while step > 1e-4:
            trial = x + step * dx
            vt = viol(trial)
            if np.isfinite(vt) and vt < v:
                break
            step *= 0.5
        else:
            break
        x, v = trial, vt
        if np.max(np.abs(step * dx)) < 1e-15:
            break
    return x


def kkt_residual(fun, eq, ineq, x, active_tol: float = 1e-7):
    """First-order optimality residual at ``x``.

    Multipliers are fitted by bounded least squares (equalities free,
    inequalities within ``active_tol`` of active and non-negative, the rest
    zero). Returns ``(max-norm residual, lam, mu)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    _, g = fun(x)
    g = np.asarray(g, dtype=float)
    c, Jc = eq(x) if eq is not None else _empty(n)
    h, Jh = ineq(x) if ineq is not None else _empty(n)
    act = np.flatnonzero(h > -active_tol)
    blocks, lower = [], []
    if c.size:
        blocks.append(_as_sparse(Jc, n).T)
        lower.append(np.full(c.size, -np.inf))
    if act.size:
        blocks.append(_as_sparse(Jh, n)[act].T)
        lower.append(np.zeros(act.size))
    lam = np.zeros(c.size)
    mu = np.zeros(h.size)
    if not blocks:
        return float(np.max(np.abs(g), initial=0.0)), lam, mu
    A = sp.hstack(blocks).toarray()
    lb = np.concatenate(lower)
    if np.all(np.isinf(lb)):
        y = scipy.linalg.lstsq(A, -g, lapack_driver="gelsd")[0]
    else:
        y = scipy.optimize.lsq_linear(A, -g, bounds=(lb, np.inf), method="bvls").x
    lam = y[: c.size]
    mu[act] = y[c.size :]
    return float(np.max(np.abs(A @ y + g), initial=0.0)), lam, mu


def slsqp_warm_start(fun, x0, eq=None, ineq=None, maxiter: int = 500, ftol: float = 1e-10):
    """SLSQP pass on ``min f s.t. eq = 0, ineq <= 0``. Returns ``(x, nfev)``;
    ``x`` is ``x0`` if SLSQP ends at a point more violated than ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    cons = []
    if eq is not None and eq(x0)[0].size:
        cons.append({"type": "eq", "fun": lambda z: eq(z)[0], "jac": lambda z: _as_sparse(eq(z)[1], n).toarray()})
    if ineq is not None and ineq(x0)[0].size:
        cons.append({"type": "ineq", "fun": lambda z: -ineq(z)[0], "jac": lambda z: -_as_sparse(ineq(z)[1], n).toarray()})
    count = [0]

    def f(z):
        count[0] += 1
        return fun(z)

    with np.errstate(invalid="ignore"):
        r = scipy.optimize.minimize(f, x0, jac=True, method="SLSQP", constraints=cons, options={"maxiter": maxiter, "ftol": ftol})

    def viol(z):
        v = 0.0
        if eq is not None:
            v = max(v, np.max(np.abs(eq(z)[0]), initial=0.0))
        if ineq is not None:
            v = max(v, np.max(np.maximum(ineq(z)[0], 0.0), initial=0.0))
        return v

    if not np.all(np.isfinite(r.x)) or viol(r.x) > max(viol(x0), 1e-8):
        return x0, count[0]
    return r.x, count[0]
