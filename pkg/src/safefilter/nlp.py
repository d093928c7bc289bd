"""Dense SQP solver for small smooth constrained programs.

Targets the estimator and filter programs of this package (tens of variables,
a few hundred constraints): damped-BFGS Hessian approximation, an exact
l1-merit line search, and a strictly convex dual active-set QP subproblem
with equality constraints eliminated through a nullspace basis. Everything is
deterministic; identical problems yield bit-identical results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla


class NumericalError(RuntimeError):
    """A callback returned a non-finite value."""


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class NlpProblem:
    """Smooth constrained program description.

    Conventions: equality constraints eq(z) = 0, inequalities ineq(z) >= 0.
    Jacobians are dense (m, n) arrays. `eval_all`, when provided, returns
    (f, grad, eq, eq_jac, ineq, ineq_jac) in one call and is used by the
    solver as a fast path; the individual callbacks remain authoritative
    for testing.
    """

    n_vars: int
    objective: Callable
    gradient: Callable
    x0: np.ndarray
    eq_con: Optional[Callable] = None
    eq_jac: Optional[Callable] = None
    ineq_con: Optional[Callable] = None
    ineq_jac: Optional[Callable] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    eval_all: Optional[Callable] = None
    eval_vals: Optional[Callable] = None
    name: str = "nlp"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (self.n_vars,):
            raise ValueError(f"x0 must have shape ({self.n_vars},)")
        if not np.all(np.isfinite(self.x0)):
            raise NumericalError("initial guess is not finite")


@dataclass
class SolveOptions:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-8
    max_iter: int = 200
    qp_max_iter: int = 500
    stall_iters: int = 6


@dataclass
class NlpResult:
    status: Status
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kkt: float = np.inf
    hessian: Optional[np.ndarray] = None


class _QpInfeasible(Exception):
    pass


class _QpStall(Exception):
    pass


def _dual_active_set(H: np.ndarray, g: np.ndarray, A: np.ndarray, b: np.ndarray,
                     max_iter: int = 500, tol: float = 1e-11):
    """min 0.5 x'Hx + g'x  s.t.  A x >= b, H symmetric positive definite.

    Dual active-set iteration starting from the unconstrained optimum;
    returns (x, mu). Raises _QpInfeasible with a Farkas-style certificate
    when the constraints are inconsistent.
    """
    n = H.shape[0]
    cho = sla.cho_factor(H, lower=True, check_finite=False)
    x = -sla.cho_solve(cho, g, check_finite=False)
    m = A.shape[0] if A is not None and A.size else 0
    mu = np.zeros(m)
    if m == 0:
        return x, mu
    W: list = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(b)
    for _ in range(max_iter):
        s = A @ x - b
        rel = s / scale
        p = int(np.argmin(rel))
        if rel[p] >= -tol:
            break
        n_p = A[p]
        u_p = 0.0
        while True:
            Hin = sla.cho_solve(cho, n_p, check_finite=False)
            if W:
                N = A[W].T
                HinN = sla.cho_solve(cho, N, check_finite=False)
                M = N.T @ HinN
                try:
                    r = sla.solve(M, N.T @ Hin, assume_a="sym", check_finite=False)
                except sla.LinAlgError:
                    r = np.linalg.lstsq(M, N.T @ Hin, rcond=None)[0]
                z = Hin - HinN @ r
            else:
                r = np.zeros(0)
                z = Hin
            curv = float(n_p @ z)
            # dual blocking step
            t1 = np.inf
            j_block = -1
            for idx, j in enumerate(W):
                if r[idx] > tol:
                    cand = u[idx] / r[idx]
                    if cand < t1:
                        t1, j_block = cand, idx
            if curv <= tol * (1.0 + float(n_p @ n_p)):
                if not np.isfinite(t1):
                    raise _QpInfeasible(p)
                t = t1
                u = u - t * r
                u_p += t
                W.pop(j_block)
                u = np.delete(u, j_block)
                continue
            t2 = -(float(n_p @ x) - b[p]) / curv
            t = min(t1, t2)
            x = x + t * z
            if len(W):
                u = u - t * r
            u_p += t
            if t2 <= t1:
                W.append(p)
                u = np.append(u, u_p)
                break
            W.pop(j_block)
            u = np.delete(u, j_block)
    else:
        raise _QpStall()
    mu[W] = u
    return x, mu


def _solve_qp(B, g, Je, ce, Ji, ci, qp_max_iter):
    """SQP subproblem: min 0.5 d'Bd + g'd st Je d = -ce, Ji d >= -ci.

    Equalities are eliminated with an orthonormal nullspace basis; the
    reduced strictly convex QP goes to the dual active-set routine.
    Returns (d, lam, mu).
    """
    n = B.shape[0]
    me = len(ce)
    if me:
        Q, R = sla.qr(Je.T, check_finite=False)
        R1 = R[:me, :me]
        if np.min(np.abs(np.diag(R1))) < 1e-12 * max(1.0, np.max(np.abs(R1))):
            raise NumericalError("equality Jacobian is rank deficient")
        y1 = sla.solve_triangular(R1.T, -ce, lower=True, check_finite=False)
        d_p = Q[:, :me] @ y1
        Zb = Q[:, me:]
    else:
        d_p = np.zeros(n)
        Zb = np.eye(n)
    Hr = Zb.T @ B @ Zb
    gr = Zb.T @ (g + B @ d_p)
    if Ji is not None and len(ci):
        Ar = Ji @ Zb
        br = -ci - Ji @ d_p
    else:
        Ar = np.zeros((0, Zb.shape[1]))
        br = np.zeros(0)
    v, mu = _dual_active_set(Hr, gr, Ar, br, max_iter=qp_max_iter)
    d = d_p + Zb @ v
    if me:
        rhs = B @ d + g
        if len(mu):
            rhs = rhs - Ji.T @ mu
        lam = sla.solve_triangular(R1, (Q[:, :me].T @ rhs), lower=False, check_finite=False)
    else:
        lam = np.zeros(0)
    return d, lam, mu


def _solve_qp_elastic(B, g, Je, ce, Ji, ci, qp_max_iter, nu):
    """l1-relaxed subproblem, always feasible: slacks on every constraint."""
    n = B.shape[0]
    me, mi = len(ce), len(ci)
    n_ext = n + 2 * me + mi
    Bx = np.zeros((n_ext, n_ext))
    Bx[:n, :n] = B
    idx = np.arange(n, n_ext)
    Bx[idx, idx] = 1e-6
    gx = np.concatenate([g, np.full(2 * me + mi, nu)])
    if me:
        Jex = np.hstack([Je, -np.eye(me), np.eye(me), np.zeros((me, mi))])
    else:
        Jex = np.zeros((0, n_ext))
    rows = []
    if mi:
        rows.append(np.hstack([Ji, np.zeros((mi, 2 * me)), np.eye(mi)]))
    rows.append(np.hstack([np.zeros((2 * me + mi, n)), np.eye(2 * me + mi)]))
    Jix = np.vstack(rows)
    cix = np.concatenate([ci, np.zeros(2 * me + mi)]) if mi else np.zeros(2 * me + mi)
    d, lam, mu = _solve_qp(Bx, gx, Jex, ce, Jix, cix, qp_max_iter)
    return d[:n], lam, (mu[:mi] if mi else np.zeros(0))


def _violation(ce, ci):
    v = 0.0
    if len(ce):
        v = max(v, float(np.max(np.abs(ce))))
    if len(ci):
        v = max(v, float(max(0.0, -np.min(ci))))
    return v


def _l1_viol(ce, ci):
    t = 0.0
    if len(ce):
        t += float(np.sum(np.abs(ce)))
    if len(ci):
        t += float(np.sum(np.maximum(0.0, -ci)))
    return t


class _Evaluator:
    """Evaluates the problem with bounds folded into the inequalities."""

    def __init__(self, p: NlpProblem):
        self.p = p
        n = p.n_vars
        self._lb_idx = self._ub_idx = None
        if p.lb is not None:
            lb = np.asarray(p.lb, dtype=float)
            self._lb_idx = np.where(np.isfinite(lb))[0]
            self._lb = lb[self._lb_idx]
        if p.ub is not None:
            ub = np.asarray(p.ub, dtype=float)
            self._ub_idx = np.where(np.isfinite(ub))[0]
            self._ub = ub[self._ub_idx]
        self.n = n

    def __call__(self, z):
        p = self.p
        if p.eval_all is not None:
            f, g, ce, Je, ci, Ji = p.eval_all(z)
        else:
            f = p.objective(z)
            g = p.gradient(z)
            ce = p.eq_con(z) if p.eq_con is not None else np.zeros(0)
            Je = p.eq_jac(z) if p.eq_jac is not None else np.zeros((0, self.n))
            ci = p.ineq_con(z) if p.ineq_con is not None else np.zeros(0)
            Ji = p.ineq_jac(z) if p.ineq_jac is not None else np.zeros((0, self.n))
        ce = np.atleast_1d(np.asarray(ce, dtype=float)) if np.size(ce) else np.zeros(0)
        ci = np.atleast_1d(np.asarray(ci, dtype=float)) if np.size(ci) else np.zeros(0)
        Je = np.asarray(Je, dtype=float).reshape(len(ce), self.n)
        Ji = np.asarray(Ji, dtype=float).reshape(len(ci), self.n)
        blocks_c, blocks_J = [ci], [Ji]
        if self._lb_idx is not None and len(self._lb_idx):
            blocks_c.append(z[self._lb_idx] - self._lb)
            Jl = np.zeros((len(self._lb_idx), self.n))
            Jl[np.arange(len(self._lb_idx)), self._lb_idx] = 1.0
            blocks_J.append(Jl)
        if self._ub_idx is not None and len(self._ub_idx):
            blocks_c.append(self._ub - z[self._ub_idx])
            Ju = np.zeros((len(self._ub_idx), self.n))
            Ju[np.arange(len(self._ub_idx)), self._ub_idx] = -1.0
            blocks_J.append(Ju)
        ci = np.concatenate(blocks_c)
        Ji = np.vstack(blocks_J)
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(ce))
                and np.all(np.isfinite(ci)) and np.all(np.isfinite(Je)) and np.all(np.isfinite(Ji))):
            raise NumericalError(f"non-finite callback value in problem '{p.name}'")
        return float(f), np.asarray(g, dtype=float), ce, Je, ci, Ji

    def values(self, z):
        """Objective and constraint values only (merit-function trials)."""
        p = self.p
        if p.eval_vals is not None:
            f, ce, ci = p.eval_vals(z)
        elif p.eval_all is not None:
            f, _, ce, _, ci, _ = p.eval_all(z)
        else:
            f = p.objective(z)
            ce = p.eq_con(z) if p.eq_con is not None else np.zeros(0)
            ci = p.ineq_con(z) if p.ineq_con is not None else np.zeros(0)
        ce = np.atleast_1d(np.asarray(ce, dtype=float)) if np.size(ce) else np.zeros(0)
        ci = np.atleast_1d(np.asarray(ci, dtype=float)) if np.size(ci) else np.zeros(0)
        blocks = [ci]
        if self._lb_idx is not None and len(self._lb_idx):
            blocks.append(z[self._lb_idx] - self._lb)
        if self._ub_idx is not None and len(self._ub_idx):
            blocks.append(self._ub - z[self._ub_idx])
        ci = np.concatenate(blocks)
        if not (np.isfinite(f) and np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))):
            raise NumericalError(f"non-finite callback value in problem '{p.name}'")
        return float(f), ce, ci


def solve(p: NlpProblem, opts: Optional[SolveOptions] = None,
          B0: Optional[np.ndarray] = None) -> NlpResult:
    """SQP with damped BFGS and an l1 merit line search.

    Declares INFEASIBLE when the elastic restoration phase stalls with
    constraint violation above feas_tol. MAX_ITER is returned when the
    iteration budget runs out without meeting the KKT tolerances. B0 seeds
    the Hessian approximation (e.g. from a previous similar solve); the
    final approximation is returned for reuse.
    """
    opts = opts or SolveOptions()
    ev = _Evaluator(p)
    n = p.n_vars
    z = p.x0.copy()
    f, g, ce, Je, ci, Ji = ev(z)
    B = np.eye(n) if B0 is None else np.asarray(B0, dtype=float).copy()
    nu = 1.0
    viol_hist = [np.inf] * opts.stall_iters
    lam = np.zeros(len(ce))
    mu = np.zeros(len(ci))
    restoring = False

    for it in range(1, opts.max_iter + 1):
        elastic = False
        try:
            d, lam, mu = _solve_qp(B, g, Je, ce, Ji, ci, opts.qp_max_iter)
        except _QpInfeasible:
            elastic = True
            d, lam, mu = _solve_qp_elastic(B, g, Je, ce, Ji, ci, opts.qp_max_iter, nu * 10.0)
        except _QpStall:
            return NlpResult(Status.MAX_ITER, z, f, _violation(ce, ci), it, lam, mu,
                             kkt=_kkt_from(g, Je, Ji, lam, mu, ci), hessian=B)

        viol = _violation(ce, ci)
        kkt = _kkt_from(g, Je, Ji, lam, mu, ci)
        if viol <= opts.feas_tol and kkt <= opts.opt_tol:
            return NlpResult(Status.OPTIMAL, z, f, viol, it, lam, mu, kkt=kkt, hessian=B)

        # infeasibility: restoration (elastic) phase stalls above feas_tol
        if elastic:
            if (viol > opts.feas_tol
                    and np.max(np.abs(d)) <= 1e-10 * (1.0 + np.max(np.abs(z)))):
                return NlpResult(Status.INFEASIBLE, z, f, viol, it, lam, mu, kkt=kkt, hessian=B)
            viol_hist.append(viol)
            if len(viol_hist) > opts.stall_iters:
                viol_hist.pop(0)
            if (viol > opts.feas_tol
                    and viol_hist[0] - viol < 1e-3 * max(viol, 1e-6)
                    and np.isfinite(viol_hist[0])):
                return NlpResult(Status.INFEASIBLE, z, f, viol, it, lam, mu, kkt=kkt, hessian=B)
            restoring = True
        elif restoring:
            viol_hist = [np.inf] * opts.stall_iters
            restoring = False

        mults = max(np.max(np.abs(lam)) if len(lam) else 0.0,
                    np.max(mu) if len(mu) else 0.0)
        nu = max(nu, 1.5 * mults + 1e-3)

        l1 = _l1_viol(ce, ci)
        phi0 = f + nu * l1
        dderiv = float(g @ d) - nu * l1
        if dderiv > -1e-16:
            dderiv = -1e-16
        alpha = 1.0
        gL_old = g - (Je.T @ lam if len(lam) else 0.0) - (Ji.T @ mu if len(mu) else 0.0)
        accepted = False
        for _ in range(40):
            z_try = z + alpha * d
            try:
                f_t, ce_t, ci_t = ev.values(z_try)
            except NumericalError:
                alpha *= 0.5
                continue
            phi_t = f_t + nu * _l1_viol(ce_t, ci_t)
            if phi_t <= phi0 + 1e-4 * alpha * dderiv:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no merit progress along the QP direction
            if elastic and viol > opts.feas_tol:
                return NlpResult(Status.INFEASIBLE, z, f, viol, it, lam, mu, kkt=kkt, hessian=B)
            return NlpResult(Status.MAX_ITER, z, f, viol, it, lam, mu, kkt=kkt, hessian=B)

        s = z_try - z
        z = z_try
        f, g, ce, Je, ci, Ji = ev(z)
        gL_new = g - (Je.T @ lam if len(lam) else 0.0) - (Ji.T @ mu if len(mu) else 0.0)
        y = gL_new - gL_old
        Bs = B @ s
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if sBs > 1e-14:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1.0 - theta) * Bs
                sy = float(s @ y)
            if sy > 1e-14:
                B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy

    viol = _violation(ce, ci)
    kkt = _kkt_from(g, Je, Ji, lam, mu, ci)
    if viol <= opts.feas_tol and kkt <= opts.opt_tol:
        return NlpResult(Status.OPTIMAL, z, f, viol, opts.max_iter, lam, mu, kkt=kkt, hessian=B)
    return NlpResult(Status.MAX_ITER, z, f, viol, opts.max_iter, lam, mu, kkt=kkt, hessian=B)


def _kkt_from(g, Je, Ji, lam, mu, ci):
    stat = g.copy()
    if len(lam):
        stat = stat - Je.T @ lam
    if len(mu):
        stat = stat - Ji.T @ mu
    res = float(np.max(np.abs(stat))) if len(stat) else 0.0
    if len(mu):
        res = max(res, float(np.max(np.abs(mu * ci))))
        res = max(res, float(max(0.0, -np.min(mu))))
    return res


def kkt_residual(p: NlpProblem, primal: np.ndarray, lam_eq: np.ndarray, mu_in: np.ndarray) -> float:
    """Inf-norm of the stacked stationarity and complementarity residuals."""
    ev = _Evaluator(p)
    _, g, _, Je, ci, Ji = ev(np.asarray(primal, dtype=float))
    lam = np.asarray(lam_eq, dtype=float) if np.size(lam_eq) else np.zeros(Je.shape[0])
    mu = np.asarray(mu_in, dtype=float) if np.size(mu_in) else np.zeros(Ji.shape[0])
    return _kkt_from(g, Je, Ji, lam, mu, ci)


def check_gradients(p: NlpProblem, z: np.ndarray, eps: float = 1e-6) -> float:
    """Worst relative error of analytic derivatives vs central differences."""
    ev = _Evaluator(p)
    z = np.asarray(z, dtype=float)
    _, g, ce, Je, ci, Ji = ev(z)
    worst = 0.0

    def fd(fun, size):
        out = np.zeros((size, len(z)))
        for i in range(len(z)):
            dz = np.zeros(len(z))
            dz[i] = eps
            hi = np.atleast_1d(fun(z + dz))
            lo = np.atleast_1d(fun(z - dz))
            out[:, i] = (hi - lo) / (2.0 * eps)
        return out

    g_fd = fd(lambda zz: p.objective(zz), 1)[0]
    worst = max(worst, float(np.max(np.abs(g - g_fd)) / (1.0 + np.max(np.abs(g_fd)))))
    if p.eq_con is not None and len(ce):
        J_fd = fd(lambda zz: p.eq_con(zz), len(ce))
        worst = max(worst, float(np.max(np.abs(p.eq_jac(z) - J_fd)) / (1.0 + np.max(np.abs(J_fd)))))
    if p.ineq_con is not None:
        ci_u = np.atleast_1d(p.ineq_con(z))
        if len(ci_u):
            J_fd = fd(lambda zz: p.ineq_con(zz), len(ci_u))
            worst = max(worst, float(np.max(np.abs(p.ineq_jac(z) - J_fd)) / (1.0 + np.max(np.abs(J_fd)))))
    return worst
