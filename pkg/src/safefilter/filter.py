"""Robust output-feedback predictive safety filter.

Builds the finite-horizon certification program around the current estimate
bundle, manages the terminal safe set, and runs the adaptive-horizon
fallback logic that keeps the loop safe when the full-horizon program goes
infeasible: full horizon, then reduced horizons, then the safe backup
controller.

Tube machinery: with linear bounding-function slopes, the in-horizon error
sequence is a known closed form and the tube sequence is affine in the
initial tube size s0 = V_s(xbar_0, xhat). Every tightened constraint row is
therefore affine in the decisions except through the smooth term
S0 = sqrt(||xbar_0 - xhat||_Ps^2 + eps^2) >= V_s, which over-approximates s0
by at most eps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.linalg as sla

from . import nlp
from .lyapunov import (
    Certificate,
    QuadraticIncrementalFunction,
    bound_fixed_point,
    bound_predict,
    bound_update_offline,
    row_support_slopes,
    tube_update,
)
from .model import ConstraintSet, SystemModel, nominal_step, rk4_jacobian
from .observer import EstimateBundle


class TerminalSetVanished(RuntimeError):
    """The terminal radius is nonpositive for the requested horizon."""


class SafeSetConstructionError(RuntimeError):
    """No positive safe-set radius is admissible."""


class FilterContractViolation(RuntimeError):
    """A reduced-horizon solve failed while the shift argument guarantees it."""


class FilterSetupError(RuntimeError):
    """The very first full-horizon solve is infeasible."""


class Branch(enum.Enum):
    FULL_HORIZON = "full"
    REDUCED_HORIZON = "reduced"
    SAFE_BACKUP = "backup"


@dataclass
class SafeSet:
    """Ellipsoidal safe set with a bound-dependent radius.

    Membership of (xbar, e, s) means ||xbar||_{P_f} <= radius(e, s) with
    radius(e, s) = alpha_max - (s + c_e * e) * gamma, certified for
    e <= e_dom and s <= s_dom: inside that domain the backup controller
    K_f keeps the nominal state in the set and every constraint row holds
    for the true state despite the tubes.
    """

    P_f: np.ndarray
    K_f: np.ndarray
    alpha_max: float
    gamma: float
    c_e: float
    e_dom: float
    s_dom: float
    rho_hat: float
    V_f: QuadraticIncrementalFunction = field(init=False)

    def __post_init__(self):
        self.P_f = np.atleast_2d(np.asarray(self.P_f, dtype=float))
        self.K_f = np.atleast_2d(np.asarray(self.K_f, dtype=float))
        self.V_f = QuadraticIncrementalFunction(self.P_f)

    def radius(self, e_bar: float, s_bar: float) -> float:
        """Admissible nominal radius; nonpositive means membership impossible."""
        if e_bar > self.e_dom * (1.0 + 1e-9) or s_bar > self.s_dom * (1.0 + 1e-9):
            return -np.inf
        return self.alpha_max - (s_bar + self.c_e * e_bar) * self.gamma

    def contains(self, xbar, e_bar: float, s_bar: float) -> bool:
        r = self.radius(e_bar, s_bar)
        if r <= 0.0:
            return False
        return self.V_f.eval(np.asarray(xbar, dtype=float), np.zeros(len(np.atleast_1d(xbar)))) <= r

    def policy_input(self, xbar) -> np.ndarray:
        return self.K_f @ np.asarray(xbar, dtype=float)


def _lqr_terminal_defaults(model: SystemModel):
    A, B = rk4_jacobian(model, np.zeros(model.n_x), np.zeros(model.n_u))
    P = sla.solve_discrete_are(A, B, np.eye(model.n_x), np.eye(model.n_u))
    K = -np.linalg.solve(np.eye(model.n_u) + B.T @ P @ B, B.T @ P @ A)
    return P, K


def size_safe_set_offline(
    model: SystemModel,
    cert: Certificate,
    Z: ConstraintSet,
    K_f: Optional[np.ndarray] = None,
    P_f: Optional[np.ndarray] = None,
    n_angles: int = 24,
    n_radii: int = 6,
    decrease_margin: float = 1e-6,
    radius_floor_frac: float = 0.25,
) -> SafeSet:
    """Size the ellipsoidal safe set by bisection on its base radius.

    A candidate radius is accepted when every grid point of the ball maps
    back into the ball under the backup gain (one-step decrease of the
    P_f-norm) and satisfies every constraint row tightened by the
    steady-state tube sizes. The radius map's shrink slope gamma is then the
    largest value that preserves membership along the bound trajectories,
    capped so the radius at the steady-state sizes keeps a fixed fraction
    of alpha_max.
    """
    if P_f is None or K_f is None:
        P_def, K_def = _lqr_terminal_defaults(model)
        P_f = P_def if P_f is None else P_f
        K_f = K_def if K_f is None else K_f
    P_f = np.atleast_2d(np.asarray(P_f, dtype=float))
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))

    A0, B0 = rk4_jacobian(model, np.zeros(model.n_x), np.zeros(model.n_u))
    if np.max(np.abs(np.linalg.eigvals(A0 + B0 @ K_f))) >= 1.0:
        raise SafeSetConstructionError("backup gain does not stabilize the origin linearization")

    w_bar = model.w_bar
    e_dom = bound_fixed_point(cert, w_bar, rho=cert.rho_d)
    s_dom = (cert.sig_so * e_dom + cert.sig_sow * w_bar) / (1.0 - cert.rho_s)

    Vf = QuadraticIncrementalFunction(P_f)
    g, h = row_support_slopes(cert, Z)
    a = np.empty(Z.n_rows)
    for j, (c_x, c_u, _) in enumerate(Z.halfspaces):
        a[j] = Vf.support(c_x + K_f.T @ c_u)
    a = np.maximum(a, 1e-12)
    budget = Z.b - s_dom * g - e_dom * h
    if np.any(budget <= 0):
        raise SafeSetConstructionError(
            "steady-state tube margins exhaust a constraint row; no safe set exists")
    alpha_rows = float(np.min(budget / a))

    # ball sample directions in the P_f metric
    ang = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    if model.n_x != 2:
        raise SafeSetConstructionError("safe-set sizing implemented for planar states")
    sphere = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    Pf_inv_half = np.linalg.inv(np.linalg.cholesky(P_f)).T  # maps unit ball to {V_f <= 1}
    dirs = sphere @ Pf_inv_half.T

    def decrease_ratio(alpha: float) -> float:
        worst = 0.0
        for r in np.linspace(alpha / n_radii, alpha, n_radii):
            pts = r * dirs
            for x in pts:
                u = K_f @ x
                ratio = Vf.eval(nominal_step(model, x, u), np.zeros(model.n_x)) / max(
                    Vf.eval(x, np.zeros(model.n_x)), 1e-12)
                worst = max(worst, ratio)
        return worst

    lo, hi = 0.0, alpha_rows
    if decrease_ratio(hi) <= 1.0 - decrease_margin:
        alpha_max = hi
    else:
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if decrease_ratio(mid) <= 1.0 - decrease_margin:
                lo = mid
            else:
                hi = mid
        alpha_max = lo
    if alpha_max <= 0.0:
        raise SafeSetConstructionError("no positive safe-set radius admissible")
    rho_hat = decrease_ratio(alpha_max)

    # shrink slope: worst row's bound-sensitivity ratio, capped by the
    # membership-invariance condition on the (e, s) corner box and by the
    # nonemptiness floor at the steady-state sizes
    with np.errstate(divide="ignore"):
        c_e = float(np.max(h / a) / max(np.max(g / a), 1e-12))
    gamma_cap = radius_floor_frac  # keep radius(e_dom, s_dom) >= frac * alpha_max
    gamma = (1.0 - gamma_cap) * alpha_max / (s_dom + c_e * e_dom)
    for s in (0.0, s_dom):
        for e in (0.0, e_dom):
            e_next = min(bound_update_offline(cert, e, w_bar), e_dom)
            s_next = min(tube_update(cert, s, e, w_bar), s_dom)
            v = s + c_e * e
            v_next = s_next + c_e * e_next
            denom = v_next - rho_hat * v
            if denom > 1e-12:
                gamma = min(gamma, 0.95 * (1.0 - rho_hat) * alpha_max / denom)
    gamma = max(gamma, 0.0)

    return SafeSet(P_f=P_f, K_f=K_f, alpha_max=alpha_max, gamma=gamma, c_e=c_e,
                   e_dom=e_dom, s_dom=s_dom, rho_hat=rho_hat)


# ---------------------------------------------------------------------------
# Certification program
# ---------------------------------------------------------------------------

@dataclass
class RpofsfProblem:
    """Transcribed certification program plus the sequences behind it."""

    problem: nlp.NlpProblem
    N: int
    pin_x0: bool
    e_seq: np.ndarray
    d_seq: np.ndarray
    s0_smoothing: float
    xhat: np.ndarray
    u_learn: np.ndarray
    idx_u0: int
    idx_x0: Optional[int]

    problem_meta: dict = field(default_factory=dict)

    def unpack(self, z: np.ndarray):
        """Return (xbars (N+1, n_x), ubars (N, n_u)) from a decision vector."""
        N = self.N
        n_x = len(self.xhat)
        if self.pin_x0:
            xbar0 = self.xhat
            us = z[:N].reshape(N, -1)
            xs = z[N:].reshape(N, n_x)
        else:
            xbar0 = z[:n_x]
            us = z[n_x:n_x + N].reshape(N, -1)
            xs = z[n_x + N:].reshape(N, n_x)
        return np.vstack([xbar0, xs]), us

    def s_sequence(self, z: np.ndarray) -> np.ndarray:
        """Tube sizes along the horizon at the decision vector z."""
        xbars, _ = self.unpack(z)
        d = xbars[0] - self.xhat
        Ps = self.problem_meta["P_s"]
        s0 = float(np.sqrt(d @ Ps @ d + self.s0_smoothing ** 2))
        rho_s = self.problem_meta["rho_s"]
        return rho_s ** np.arange(self.N + 1) * s0 + self.d_seq


def build_rpofsf_nlp(
    model: SystemModel,
    cert: Certificate,
    Z: ConstraintSet,
    safe_set: SafeSet,
    bundle: EstimateBundle,
    u_learn,
    N: int,
    pin_x0: bool = False,
    s0_smoothing: float = 1e-9,
    warm: Optional[np.ndarray] = None,
) -> RpofsfProblem:
    """Transcribe the certification program for the given estimate bundle.

    Decisions: the input sequence, the nominal trajectory, and (unless
    pinned) the initial nominal state. Objective: squared deviation of the
    realized first input from the proposed one. Constraints: nominal
    dynamics as equalities; per-step constraint rows tightened by the tube
    and estimation-error supports; terminal membership in the safe set at
    the horizon-end bound sizes.

    Raises TerminalSetVanished when the terminal radius is nonpositive even
    at the smallest attainable initial tube size.
    """
    if N < 1:
        raise ValueError("horizon must be at least 1")
    n_x, n_u = model.n_x, model.n_u
    xhat = np.asarray(bundle.xhat, dtype=float)
    u_learn = np.atleast_1d(np.asarray(u_learn, dtype=float))
    w_bar = model.w_bar
    eps = s0_smoothing

    e_seq = np.array([bound_predict(cert, bundle.e_bar, j, w_bar, rho=cert.rho_d)
                      for j in range(N + 1)])
    d_seq = np.empty(N + 1)
    d_seq[0] = 0.0
    for i in range(N):
        d_seq[i + 1] = cert.rho_s * d_seq[i] + cert.sig_so * e_seq[i] + cert.sig_sow * w_bar
    rho_pow = cert.rho_s ** np.arange(N + 1)

    g, h = row_support_slopes(cert, Z)
    n_rows = Z.n_rows

    alpha_const = safe_set.alpha_max - safe_set.gamma * (
        d_seq[N] + safe_set.c_e * e_seq[N])
    alpha_s0_coef = safe_set.gamma * rho_pow[N]
    if e_seq[N] > safe_set.e_dom * (1.0 + 1e-9):
        raise TerminalSetVanished(
            f"horizon-end error bound {e_seq[N]:.4g} exceeds the certified domain")
    if alpha_const - alpha_s0_coef * eps <= 0.0:
        raise TerminalSetVanished(
            f"terminal radius {alpha_const - alpha_s0_coef * eps:.4g} is nonpositive")

    # decision layout
    if pin_x0:
        off_u, off_x = 0, N * n_u
    else:
        off_u, off_x = n_x, n_x + N * n_u
    n_vars = off_x + N * n_x

    # constant linear template of the tightened rows: val = base - M z - s0c * S0
    m_tight = N * n_rows
    M = np.zeros((m_tight + 2, n_vars))
    base = np.empty(m_tight + 2)
    s0c = np.empty(m_tight + 2)
    for i in range(N):
        rows = slice(i * n_rows, (i + 1) * n_rows)
        base[rows] = Z.b - h * e_seq[i] - g * d_seq[i]
        s0c[rows] = g * rho_pow[i]
        M[rows, off_u + i * n_u:off_u + (i + 1) * n_u] = Z.C_u
        if i == 0:
            if pin_x0:
                base[rows] -= Z.C_x @ xhat
            else:
                M[rows, :n_x] = Z.C_x
        else:
            M[rows, off_x + (i - 1) * n_x:off_x + i * n_x] = Z.C_x
    # terminal radius row and tube-domain row
    base[m_tight] = alpha_const
    s0c[m_tight] = alpha_s0_coef
    base[m_tight + 1] = safe_set.s_dom - d_seq[N]
    s0c[m_tight + 1] = rho_pow[N]

    P_s = cert.P_s
    P_f = safe_set.P_f
    K = cert.K
    xN_sl = slice(off_x + (N - 1) * n_x, off_x + N * n_x)

    # flat-index templates for the block-bidiagonal equality Jacobian
    Je_base = np.zeros((N * n_x, n_vars))
    for i in range(N):
        Je_base[i * n_x:(i + 1) * n_x, off_x + i * n_x:off_x + (i + 1) * n_x] = np.eye(n_x)
    iB, rB, cB = np.meshgrid(np.arange(N), np.arange(n_x), np.arange(n_u), indexing="ij")
    idxB = ((iB * n_x + rB) * n_vars + off_u + iB * n_u + cB).ravel()
    if N > 1:
        iA, rA, cA = np.meshgrid(np.arange(1, N), np.arange(n_x), np.arange(n_x), indexing="ij")
        idxA = ((iA * n_x + rA) * n_vars + off_x + (iA - 1) * n_x + cA).ravel()
    else:
        idxA = np.zeros(0, dtype=int)
    if not pin_x0:
        r0, c0 = np.meshgrid(np.arange(n_x), np.arange(n_x), indexing="ij")
        idxA0 = (r0 * n_vars + c0).ravel()

    def _s0(z):
        if pin_x0:
            return eps, None
        d = z[:n_x] - xhat
        v = P_s @ d
        s0 = float(np.sqrt(d @ v + eps * eps))
        return s0, v / s0

    def _stage_points(z):
        """Stage states/inputs (xbar_i, ubar_i), i = 0..N-1, as batches."""
        us_all = z[off_u:off_u + N * n_u].reshape(N, n_u)
        xs_next = z[off_x:off_x + N * n_x].reshape(N, n_x)
        x0 = xhat if pin_x0 else z[:n_x]
        xs_all = np.vstack([x0[None, :], xs_next[:-1]])
        return xs_all, us_all, xs_next

    def _rollout(z, with_jac):
        xs_all, us_all, xs_next = _stage_points(z)
        ce = (xs_next - nominal_step(model, xs_all, us_all)).ravel()
        if not with_jac:
            return ce, None, None
        if model.continuous_jacobian is not None and model.discrete_dynamics is None:
            As, Bs = rk4_jacobian(model, xs_all, us_all)
        else:
            pairs = [rk4_jacobian(model, xs_all[i], us_all[i]) for i in range(N)]
            As = np.stack([p[0] for p in pairs])
            Bs = np.stack([p[1] for p in pairs])
        return ce, As, Bs

    def _objective_terms(z):
        u0 = z[off_u:off_u + n_u]
        if pin_x0:
            r = u_learn - u0
        else:
            r = u_learn - u0 - K @ (xhat - z[:n_x])
        return r

    def eval_vals(z):
        r = _objective_terms(z)
        f = float(r @ r)
        ce, _, _ = _rollout(z, with_jac=False)
        s0, _ = _s0(z)
        ci = base - M @ z - s0c * s0
        alpha = ci[m_tight]
        xN = z[xN_sl]
        # signed square keeps the row monotone in alpha (C1 at alpha = 0)
        quad = alpha * abs(alpha) - float(xN @ P_f @ xN)
        ci = np.concatenate([ci, [quad]])
        return f, ce, ci

    def eval_all(z):
        r = _objective_terms(z)
        f = float(r @ r)
        grad = np.zeros(n_vars)
        grad[off_u:off_u + n_u] = -2.0 * r
        if not pin_x0:
            grad[:n_x] = 2.0 * (K.T @ r)
        ce, As, Bs = _rollout(z, with_jac=True)
        Je = Je_base.copy()
        flat = Je.ravel()
        flat[idxB] = -Bs.ravel()
        if N > 1:
            flat[idxA] = -As[1:].ravel()
        if not pin_x0:
            flat[idxA0] = -As[0].ravel()
        s0, ds0 = _s0(z)
        vals = base - M @ z - s0c * s0
        Ji = -M.copy()
        if ds0 is not None:
            Ji[:, :n_x] -= np.outer(s0c, ds0)
        alpha = vals[m_tight]
        xN = z[xN_sl]
        quad = alpha * abs(alpha) - float(xN @ P_f @ xN)
        Jq = (2.0 * abs(alpha)) * Ji[m_tight].copy()
        Jq[xN_sl] -= 2.0 * (P_f @ xN)
        ci = np.concatenate([vals, [quad]])
        Ji = np.vstack([Ji, Jq[None, :]])
        return f, grad, ce, Je, ci, Ji

    def objective(z):
        r = _objective_terms(z)
        return float(r @ r)

    def gradient(z):
        return eval_all(z)[1]

    def eq_con(z):
        return _rollout(z, with_jac=False)[0]

    def eq_jac(z):
        return eval_all(z)[3]

    def ineq_con(z):
        return eval_vals(z)[2]

    def ineq_jac(z):
        return eval_all(z)[5]

    if warm is not None:
        x0 = np.asarray(warm, dtype=float)
        if x0.shape != (n_vars,):
            raise ValueError("warm start has wrong dimension")
    else:
        x0 = _cold_start(model, safe_set, xhat, N, pin_x0, n_x, n_u)

    problem = nlp.NlpProblem(
        n_vars=n_vars, objective=objective, gradient=gradient, x0=x0,
        eq_con=eq_con, eq_jac=eq_jac, ineq_con=ineq_con, ineq_jac=ineq_jac,
        eval_all=eval_all, eval_vals=eval_vals, name=f"rpofsf[N={N}]")
    out = RpofsfProblem(problem=problem, N=N, pin_x0=pin_x0, e_seq=e_seq,
                        d_seq=d_seq, s0_smoothing=eps, xhat=xhat,
                        u_learn=u_learn, idx_u0=off_u, idx_x0=None if pin_x0 else 0)
    out.problem_meta = {"P_s": cert.P_s, "rho_s": cert.rho_s, "alpha_const": alpha_const,
                        "alpha_s0_coef": alpha_s0_coef, "n_rows": n_rows,
                        "off_u": off_u, "off_x": off_x}
    return out


def _cold_start(model, safe_set, xhat, N, pin_x0, n_x, n_u):
    """Roll the backup gain from the estimate as an initial guess."""
    xs = np.empty((N + 1, n_x))
    us = np.empty((N, n_u))
    xs[0] = xhat
    for i in range(N):
        us[i] = safe_set.K_f @ xs[i]
        us[i] = np.clip(us[i], -1e3, 1e3)
        xs[i + 1] = nominal_step(model, xs[i], us[i])
    if pin_x0:
        return np.concatenate([us.ravel(), xs[1:].ravel()])
    return np.concatenate([xs[0], us.ravel(), xs[1:].ravel()])


def build_mpsc_nlp(
    model: SystemModel,
    Z: ConstraintSet,
    safe_set: SafeSet,
    x_k,
    u_learn,
    N: int,
) -> nlp.NlpProblem:
    """Nominal state-feedback certification program (the degenerate oracle).

    Zero disturbance, perfect state: minimize the first-input deviation
    subject to the raw constraint rows and terminal membership at the base
    radius. Kept as an independent transcription for equivalence testing
    against the output-feedback program's degenerate mode.
    """
    n_x, n_u = model.n_x, model.n_u
    x_k = np.asarray(x_k, dtype=float)
    u_learn = np.atleast_1d(np.asarray(u_learn, dtype=float))
    off_x = N * n_u
    n_vars = off_x + N * n_x
    P_f = safe_set.P_f
    alpha = safe_set.alpha_max

    def states(z):
        return np.vstack([x_k, z[off_x:].reshape(N, n_x)])

    def objective(z):
        r = u_learn - z[:n_u]
        return float(r @ r)

    def gradient(z):
        gr = np.zeros(n_vars)
        gr[:n_u] = -2.0 * (u_learn - z[:n_u])
        return gr

    def eq_con(z):
        xs = states(z)
        out = np.empty(N * n_x)
        for i in range(N):
            out[i * n_x:(i + 1) * n_x] = xs[i + 1] - nominal_step(model, xs[i], z[i * n_u:(i + 1) * n_u])
        return out

    def eq_jac(z):
        xs = states(z)
        J = np.zeros((N * n_x, n_vars))
        for i in range(N):
            rs = slice(i * n_x, (i + 1) * n_x)
            A, B = rk4_jacobian(model, xs[i], z[i * n_u:(i + 1) * n_u])
            J[rs, off_x + i * n_x:off_x + (i + 1) * n_x] = np.eye(n_x)
            J[rs, i * n_u:(i + 1) * n_u] = -B
            if i > 0:
                J[rs, off_x + (i - 1) * n_x:off_x + i * n_x] = -A
        return J

    def ineq_con(z):
        xs = states(z)
        vals = []
        for i in range(N):
            vals.append(Z.b - Z.C_x @ xs[i] - Z.C_u @ z[i * n_u:(i + 1) * n_u])
        xN = xs[N]
        vals.append([alpha ** 2 - float(xN @ P_f @ xN)])
        return np.concatenate(vals)

    def ineq_jac(z):
        xs = states(z)
        J = np.zeros((N * Z.n_rows + 1, n_vars))
        for i in range(N):
            rs = slice(i * Z.n_rows, (i + 1) * Z.n_rows)
            J[rs, i * n_u:(i + 1) * n_u] = -Z.C_u
            if i > 0:
                J[rs, off_x + (i - 1) * n_x:off_x + i * n_x] = -Z.C_x
        J[-1, off_x + (N - 1) * n_x:off_x + N * n_x] = -2.0 * (P_f @ xs[N])
        return J

    xs = np.empty((N + 1, n_x))
    us = np.zeros((N, n_u))
    xs[0] = x_k
    for i in range(N):
        us[i] = safe_set.K_f @ xs[i]
        xs[i + 1] = nominal_step(model, xs[i], us[i])
    x0 = np.concatenate([us.ravel(), xs[1:].ravel()])
    return nlp.NlpProblem(n_vars=n_vars, objective=objective, gradient=gradient,
                          x0=x0, eq_con=eq_con, eq_jac=eq_jac,
                          ineq_con=ineq_con, ineq_jac=ineq_jac, name=f"mpsc[N={N}]")


# ---------------------------------------------------------------------------
# Algorithm: adaptive horizon with safe backup
# ---------------------------------------------------------------------------

@dataclass
class CertifiedInput:
    """Outcome of one certification step."""

    u: np.ndarray
    branch: Branch
    objective: float
    horizon: int
    solver_iterations: int
    solver_status: Optional[nlp.Status]
    kkt: float
    plan_x: Optional[np.ndarray] = None
    plan_u: Optional[np.ndarray] = None
    terminal_e: float = np.nan
    terminal_s: float = np.nan
    terminal_radius: float = np.nan
    terminal_vf: float = np.nan


@dataclass
class FilterState:
    """Bookkeeping for the adaptive-horizon fallback logic."""

    k: int = 0
    k_feasible: int = 0
    fallback_xbar: Optional[np.ndarray] = None
    plan_x: Optional[np.ndarray] = None
    plan_u: Optional[np.ndarray] = None
    backup_entry: Optional[dict] = None


class SafetyFilterController:
    """Certifies proposed inputs step by step for one closed-loop run.

    Wraps the full-horizon program, the reduced-horizon ladder, and the
    safe backup controller; owns the warm-start plan between steps.
    """

    def __init__(self, model: SystemModel, cert: Certificate, Z: ConstraintSet,
                 safe_set: SafeSet, N: int, pin_x0: bool = True,
                 s0_smoothing: float = 1e-9,
                 opts: Optional[nlp.SolveOptions] = None):
        self.model = model
        self.cert = cert
        self.Z = Z
        self.safe_set = safe_set
        self.N = N
        self.pin_x0 = pin_x0
        self.s0_smoothing = s0_smoothing
        self.opts = opts or nlp.SolveOptions()
        self.state = FilterState()

    def certify(self, bundle: EstimateBundle, u_learn) -> CertifiedInput:
        """One pass of the adaptive-horizon certification logic."""
        st = self.state
        k = st.k
        u_learn = np.atleast_1d(np.asarray(u_learn, dtype=float))

        full = self._try_solve(bundle, u_learn, self.N, warm=self._warm(self.N, bundle))
        if full is not None:
            st.k_feasible = k
            out = self._adopt_plan(bundle, u_learn, full, self.N, Branch.FULL_HORIZON)
        elif k < self.N + st.k_feasible:
            Nt = self.N - (k - st.k_feasible)
            red = self._try_solve(bundle, u_learn, Nt, warm=self._warm(Nt, bundle))
            if red is None:
                raise FilterContractViolation(
                    f"reduced-horizon solve (N~={Nt}) infeasible at step {k}; "
                    "certified-input shift argument violated")
            out = self._adopt_plan(bundle, u_learn, red, Nt, Branch.REDUCED_HORIZON)
        else:
            if st.fallback_xbar is None:
                raise FilterSetupError("safe backup requested before any feasible solve")
            xbar = st.fallback_xbar
            u_b = self.safe_set.policy_input(xbar)
            u = u_b + self.cert.K @ (bundle.xhat - xbar)
            if st.backup_entry is None:
                st.backup_entry = {
                    "xbar": xbar.copy(),
                    "vf": self.safe_set.V_f.eval(xbar, np.zeros(self.model.n_x)),
                    "e": bundle.e_bar,
                }
            st.fallback_xbar = nominal_step(self.model, xbar, u_b)
            obj = float(np.sum((u_learn - u) ** 2))
            out = CertifiedInput(u=u, branch=Branch.SAFE_BACKUP, objective=obj,
                                 horizon=0, solver_iterations=0, solver_status=None,
                                 kkt=0.0)
        if out.branch is not Branch.SAFE_BACKUP:
            st.backup_entry = None
        st.k += 1
        return out

    # -- internals ---------------------------------------------------------

    def _try_solve(self, bundle, u_learn, N, warm):
        try:
            built = build_rpofsf_nlp(self.model, self.cert, self.Z, self.safe_set,
                                     bundle, u_learn, N, pin_x0=self.pin_x0,
                                     s0_smoothing=self.s0_smoothing, warm=warm)
        except TerminalSetVanished:
            if self.state.k == 0:
                raise FilterSetupError("terminal set empty at the initial step")
            return None
        res = nlp.solve(built.problem, self.opts)
        if res.status is nlp.Status.OPTIMAL:
            return built, res
        if self.state.k == 0:
            raise FilterSetupError(
                f"initial full-horizon solve not optimal: {res.status.value}")
        return None

    def _adopt_plan(self, bundle, u_learn, solved, N, branch):
        built, res = solved
        xbars, ubars = built.unpack(res.x)
        u = ubars[0] + self.cert.K @ (bundle.xhat - xbars[0])
        st = self.state
        st.plan_x, st.plan_u = xbars, ubars
        st.fallback_xbar = xbars[1].copy() if N >= 1 else xbars[0].copy()
        s_seq = self._s_seq(built, res.x)
        rad = self.safe_set.radius(built.e_seq[N], s_seq[N])
        return CertifiedInput(
            u=u, branch=branch, objective=res.objective, horizon=N,
            solver_iterations=res.iterations, solver_status=res.status, kkt=res.kkt,
            plan_x=xbars, plan_u=ubars,
            terminal_e=built.e_seq[N], terminal_s=s_seq[N], terminal_radius=rad,
            terminal_vf=self.safe_set.V_f.eval(xbars[N], np.zeros(self.model.n_x)))

    def _s_seq(self, built, z):
        xbars, _ = built.unpack(z)
        d = xbars[0] - built.xhat
        s0 = float(np.sqrt(d @ self.cert.P_s @ d + built.s0_smoothing ** 2))
        return self.cert.rho_s ** np.arange(built.N + 1) * s0 + built.d_seq

    def _warm(self, N, bundle):
        """Shift the stored plan and append the backup tail."""
        st = self.state
        if st.plan_x is None or st.plan_u is None:
            return None
        xs, us = st.plan_x, st.plan_u
        # shifted sequences, extended with the backup controller as needed
        xs_s = list(xs[1:])
        us_s = list(us[1:])
        while len(us_s) < N:
            x_last = xs_s[-1]
            u_t = self.safe_set.K_f @ x_last
            us_s.append(u_t)
            xs_s.append(nominal_step(self.model, x_last, u_t))
        xs_s = np.asarray(xs_s[:N + 1])
        us_s = np.asarray(us_s[:N])
        if len(xs_s) < N + 1:
            return None
        if self.pin_x0:
            return np.concatenate([us_s.ravel(), xs_s[1:N + 1].ravel()])
        return np.concatenate([xs_s[0], us_s.ravel(), xs_s[1:N + 1].ravel()])
