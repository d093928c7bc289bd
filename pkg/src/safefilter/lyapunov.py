"""Quadratic incremental Lyapunov functions, error/tube recursions, and
ellipsoidal constraint tightening.

Two P-weighted norms drive everything: V_o (shared by the detectability and
observer inequalities) and V_s (the stabilizability function paired with the
tube feedback). Because the class-K bounding functions are linear, the scalar
bound recursions compose exactly and admit closed forms. Certificates are
config inputs here; the grid verifier falsifies invalid ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    ConstraintSet,
    FeedbackPolicy,
    SystemModel,
    nominal_step,
)


class CertificateError(ValueError):
    """Certificate matrix is not usable (e.g. not SPD)."""


def _chol_spd(P: np.ndarray, name: str) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise CertificateError(f"{name} is not symmetric positive definite") from exc


@dataclass
class QuadraticIncrementalFunction:
    """V(a, b) = sqrt((a-b)' P (a-b)) for SPD P."""

    P: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self._chol = _chol_spd(self.P, "P")
        self._inv = np.linalg.inv(self.P)
        eigs = np.linalg.eigvalsh(self.P)
        self.lam_min = float(eigs[0])
        self.lam_max = float(eigs[-1])

    def eval(self, a, b) -> float:
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        return float(np.sqrt(max(d @ self.P @ d, 0.0)))

    def eval_batch(self, a, b) -> np.ndarray:
        """Batched evaluation over leading axes."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        q = np.einsum("...i,ij,...j->...", d, self.P, d)
        return np.sqrt(np.maximum(q, 0.0))

    def support(self, v) -> float:
        """Support of the unit sublevel set {||d||_P <= 1} on direction v.

        Equals ||v||_{P^-1}; multiply by a radius r for {V <= r}.
        """
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(v @ self._inv @ v, 0.0)))


def eval_incremental(V: QuadraticIncrementalFunction, a, b) -> float:
    return V.eval(a, b)


@dataclass
class Certificate:
    """Contraction rates, linear sigma-function slopes, and the quadratic
    function matrices plus gains that realize them.

    rho_d/rho_o/rho_s are the detectability, observer, and stabilizability
    decay rates; the sig_* fields are the slopes of the associated linear
    class-K bounds. P_o backs both the detectability function and the
    observer error bound; P_s backs the tube. K is the tube feedback gain
    and L the observer correction gain.
    """

    rho_d: float = 0.74
    rho_o: float = 0.67
    rho_s: float = 0.78
    sig_ow: float = 2.25
    sig_so: float = 1.04
    sig_sow: float = 2.23
    sig_dw: float = 2.25
    sig_dy: float = 0.0
    sig_d: float = 0.0
    sig_oL: float = 0.0
    sig_oLw: float = 0.0
    sig_sw: float = 2.23
    sig_pi: float = 0.0
    P_o: np.ndarray = None
    P_s: np.ndarray = None
    K: np.ndarray = None
    L: np.ndarray = None
    V_o: QuadraticIncrementalFunction = field(init=False, default=None)
    V_s: QuadraticIncrementalFunction = field(init=False, default=None)

    def __post_init__(self):
        for name in ("rho_d", "rho_o", "rho_s"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise CertificateError(f"{name} must lie in (0, 1), got {r}")
        for name in ("sig_ow", "sig_so", "sig_sow", "sig_dw", "sig_dy",
                     "sig_d", "sig_oL", "sig_oLw", "sig_sw", "sig_pi"):
            if getattr(self, name) < 0:
                raise CertificateError(f"{name} must be nonnegative")
        if self.P_o is not None:
            self.P_o = np.atleast_2d(np.asarray(self.P_o, dtype=float))
            self.V_o = QuadraticIncrementalFunction(self.P_o)
            if self.sig_d == 0.0:
                # Lipschitz slope of V_o by the triangle inequality.
                self.sig_d = float(np.sqrt(self.V_o.lam_max))
        if self.P_s is not None:
            self.P_s = np.atleast_2d(np.asarray(self.P_s, dtype=float))
            self.V_s = QuadraticIncrementalFunction(self.P_s)
        if self.K is not None:
            self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
            if self.sig_pi == 0.0:
                self.sig_pi = float(np.linalg.norm(self.K, 2))
        if self.L is not None:
            self.L = np.asarray(self.L, dtype=float).reshape(-1, 1) if np.asarray(self.L).ndim == 1 else np.atleast_2d(np.asarray(self.L, dtype=float))

    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy(K=self.K)


def bound_update_offline(cert: Certificate, e_bar: float, w_bar: float) -> float:
    """One-step offline estimation-error bound: rho_o*e + sig_ow*w_bar."""
    if e_bar < 0:
        raise ValueError("e_bar must be nonnegative")
    return cert.rho_o * e_bar + cert.sig_ow * w_bar


def bound_update_online(
    cert: Certificate,
    e_bar: float,
    w_bar: float,
    w_hat_norm: float,
    output_residual_norm: float,
) -> float:
    """One-step online bound using the realized observer residuals.

    rho_d*e + sig_dw*(w_bar + ||w_hat||) + sig_dy*||yhat - y||, where w_hat
    is the disturbance reconstruction E'(EE')^-1 L_hat of the correction.
    """
    if min(e_bar, w_bar, w_hat_norm, output_residual_norm) < 0:
        raise ValueError("all arguments must be nonnegative")
    return (
        cert.rho_d * e_bar
        + cert.sig_dw * (w_bar + w_hat_norm)
        + cert.sig_dy * output_residual_norm
    )


def reconstruct_disturbance(model: SystemModel, correction: np.ndarray) -> np.ndarray:
    """Minimum-norm w_hat with E w_hat = correction: E'(EE')^-1 * correction."""
    E = model.E
    EEt = E @ E.T
    try:
        sol = np.linalg.solve(EEt, np.asarray(correction, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise CertificateError("E E' is singular; disturbance map degenerate") from exc
    return E.T @ sol


def bound_predict(cert: Certificate, e_bar_k: float, i: int, w_bar: float, rho: Optional[float] = None) -> float:
    """i-step-ahead bound envelope rho^i*e + ((1-rho^i)/(1-rho))*sig_ow*w_bar.

    Closed form of iterating bound_update_offline; rho defaults to rho_o.
    The filter's in-horizon sequences use rho = rho_d.
    """
    if i < 0:
        raise ValueError("step count must be nonnegative")
    r = cert.rho_o if rho is None else rho
    ri = r ** i
    return ri * e_bar_k + (1.0 - ri) / (1.0 - r) * cert.sig_ow * w_bar


def bound_fixed_point(cert: Certificate, w_bar: float, rho: Optional[float] = None) -> float:
    """Fixed point sig_ow*w_bar/(1-rho) of the offline recursion."""
    r = cert.rho_o if rho is None else rho
    return cert.sig_ow * w_bar / (1.0 - r)


def tube_update(cert: Certificate, s_bar: float, e_bar: float, w_bar: float) -> float:
    """One-step tube recursion rho_s*s + sig_so*e + sig_sow*w_bar."""
    if s_bar < 0 or e_bar < 0:
        raise ValueError("s_bar and e_bar must be nonnegative")
    return cert.rho_s * s_bar + cert.sig_so * e_bar + cert.sig_sow * w_bar


def tube_fixed_point(cert: Certificate, e_bar: float, w_bar: float) -> float:
    """Fixed point of the tube recursion at constant e_bar."""
    return (cert.sig_so * e_bar + cert.sig_sow * w_bar) / (1.0 - cert.rho_s)


def row_support_slopes(cert: Certificate, Z: ConstraintSet):
    """Per-row support slopes (g, h): margin = s_bar*g_j + e_bar*h_j.

    g_j is the support of the unit V_s sublevel set on c_x + K' c_u (the
    input deviation K*delta folded into the row); h_j the support of the
    unit V_o set on c_x.
    """
    g = np.empty(Z.n_rows)
    h = np.empty(Z.n_rows)
    for j, (c_x, c_u, _) in enumerate(Z.halfspaces):
        v = c_x + cert.K.T @ c_u
        g[j] = cert.V_s.support(v)
        h[j] = cert.V_o.support(c_x)
    return g, h


def tightening_margin(cert: Certificate, row, s_bar: float, e_bar: float) -> float:
    """Margin to subtract from a row bound so the true (x, u) stays feasible.

    m = s_bar * ||c_x + K' c_u||_{P_s^-1} + e_bar * ||c_x||_{P_o^-1}, the
    support of the two error ellipsoids on the row direction.
    """
    if s_bar < 0 or e_bar < 0:
        raise ValueError("s_bar and e_bar must be nonnegative")
    c_x, c_u, _ = row
    c_x = np.atleast_1d(np.asarray(c_x, dtype=float))
    c_u = np.atleast_1d(np.asarray(c_u, dtype=float))
    v = c_x + cert.K.T @ c_u
    return s_bar * cert.V_s.support(v) + e_bar * cert.V_o.support(c_x)


@dataclass
class TighteningTable:
    """Pre-computed margins m[j, i] for constraint row j at prediction step i."""

    margins: np.ndarray  # (n_rows, N)
    s_seq: np.ndarray
    e_seq: np.ndarray


def build_tightening_table(
    cert: Certificate,
    Z: ConstraintSet,
    e_bar0: float,
    w_bar: float,
    N: int,
    s_bar0: float = 0.0,
) -> TighteningTable:
    """Margins along an N-step horizon from initial bounds (e_bar0, s_bar0).

    The error sequence uses the rho_d closed form (the in-horizon prediction
    law); the tube sequence iterates tube_update on it.
    """
    e_seq = np.array([bound_predict(cert, e_bar0, j, w_bar, rho=cert.rho_d) for j in range(N + 1)])
    s_seq = np.empty(N + 1)
    s_seq[0] = s_bar0
    for i in range(N):
        s_seq[i + 1] = tube_update(cert, s_seq[i], e_seq[i], w_bar)
    g, h = row_support_slopes(cert, Z)
    margins = np.outer(g, s_seq[:N]) + np.outer(h, e_seq[:N])
    return TighteningTable(margins=margins, s_seq=s_seq, e_seq=e_seq)


# ---------------------------------------------------------------------------
# Grid verification
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Sampling plan for certificate falsification.

    States are gridded n1 x n2 over the given box; each grid state is paired
    with displaced partners (n_dirs directions at pair_radius) plus all pairs
    of a coarse sub-grid, so both local (differential) and long-range slack is
    probed. Disturbances sit at the box corners (the inequalities are affine
    in w, so corners extremize them) plus zero.
    """

    x_lo: np.ndarray
    x_hi: np.ndarray
    n_points: tuple = (50, 50)
    u_lo: float = -6.0
    u_hi: float = 6.0
    n_u: int = 11
    n_dirs: int = 12
    pair_radius: float = None
    n_coarse: int = 8
    e_max: float = 0.2
    tolerance: float = 1e-9

    def __post_init__(self):
        self.x_lo = np.atleast_1d(np.asarray(self.x_lo, dtype=float))
        self.x_hi = np.atleast_1d(np.asarray(self.x_hi, dtype=float))
        if self.pair_radius is None:
            self.pair_radius = float(np.linalg.norm(self.x_hi - self.x_lo)) / (2.0 * max(self.n_points))


@dataclass
class CheckResult:
    name: str
    min_slack: float
    arg_worst: tuple


@dataclass
class VerificationReport:
    checks: list
    tolerance: float

    @property
    def min_slack(self) -> float:
        return min(c.min_slack for c in self.checks)

    @property
    def passed(self) -> bool:
        return self.min_slack >= -self.tolerance

    @property
    def worst(self) -> CheckResult:
        return min(self.checks, key=lambda c: c.min_slack)

    def summary(self) -> str:
        lines = [f"certificate verification: {'PASS' if self.passed else 'FAIL'} "
                 f"(tolerance {self.tolerance:g})"]
        for c in self.checks:
            lines.append(f"  {c.name:<24s} min slack {c.min_slack: .6e} at {c.arg_worst}")
        lines.append(f"  worst: {self.worst.name} with slack {self.min_slack:.6e}")
        return "\n".join(lines)


def _state_grid(spec: GridSpec):
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(spec.x_lo, spec.x_hi, spec.n_points)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _pair_states(spec: GridSpec, n_x: int):
    """(x, xtilde) pairs: displaced near-neighbors plus coarse all-pairs."""
    xs = _state_grid(spec)
    pairs = []
    if n_x == 2:
        ang = np.linspace(0.0, 2.0 * np.pi, spec.n_dirs, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        dirs = np.concatenate([np.eye(n_x), -np.eye(n_x)], axis=0)
    for d in dirs:
        xt = xs + spec.pair_radius * d
        ok = np.all((xt >= spec.x_lo - 1e-12) & (xt <= spec.x_hi + 1e-12), axis=1)
        pairs.append((xs[ok], xt[ok]))
    coarse_axes = [np.linspace(lo, hi, spec.n_coarse) for lo, hi in zip(spec.x_lo, spec.x_hi)]
    mesh = np.meshgrid(*coarse_axes, indexing="ij")
    cg = np.stack([m.ravel() for m in mesh], axis=-1)
    ii, jj = np.meshgrid(np.arange(len(cg)), np.arange(len(cg)), indexing="ij")
    mask = ii.ravel() != jj.ravel()
    pairs.append((cg[ii.ravel()[mask]], cg[jj.ravel()[mask]]))
    return pairs


def _w_corners(model: SystemModel, include_zero: bool = True):
    r = model.w_inf_bound
    if r == 0:
        return np.zeros((1, model.n_w))
    corners = np.array([2.0 * np.array(c) - 1.0 for c in np.ndindex(*(2,) * model.n_w)]) * r
    if include_zero:
        corners = np.vstack([corners, np.zeros(model.n_w)])
    return corners


def verify_certificate_grid(
    cert: Certificate,
    model: SystemModel,
    policy: Optional[FeedbackPolicy],
    spec: GridSpec,
) -> VerificationReport:
    """Falsify the decrease inequalities on sampled tuples.

    Checks, where the certificate carries the needed ingredients:
      detectability   V_o(x+, xt+) <= rho_d V_o + sig_dw||w-wt|| + sig_dy||y-yt||
      stabilizability V_s(x+, xt+) <= rho_s V_s + sig_sw||w-wt||   (xt driven by pi)
      feedback bound  ||pi(xt,x,u) - u|| <= sig_pi ||x-xt||
      observer        V_o(obs+, true+) <= rho_o V_o + sig_ow||w||
      correction      ||L innov|| <= sig_oL V_o + sig_oLw w_bar
      cross           V_s(xbar+, xhat+) <= rho_s V_s + sig_so V_o + sig_sow w_bar
      continuity      |V_o(a, c) - V_o(b, c)| <= sig_d ||a-b||
    plus analytic slope conditions that make the w-channels globally valid.
    A failing report is a valid result; passing means no sampled tuple
    violates any inequality by more than the tolerance.
    """
    checks = []
    pairs = _pair_states(spec, model.n_x)
    u_grid = np.linspace(spec.u_lo, spec.u_hi, spec.n_u)
    corners = _w_corners(model)
    # difference set of the disturbance box: corner differences (incl. zero)
    diffs = (corners[:, None, :] - corners[None, :, :]).reshape(-1, model.n_w)
    dw = np.unique(np.round(diffs, 12), axis=0)

    if cert.V_o is not None:
        checks.append(_check_detectability(cert, model, pairs, u_grid, dw, spec))
    if cert.V_s is not None and policy is not None:
        checks.append(_check_stabilizability(cert, model, policy, pairs, u_grid, dw, spec))
        checks.append(_check_feedback_slope(cert, policy, pairs))
    if cert.V_o is not None and cert.L is not None:
        checks.append(_check_observer(cert, model, pairs, u_grid, corners, spec))
        checks.append(_check_correction(cert, model, pairs, u_grid, corners, spec))
    if cert.V_s is not None and cert.V_o is not None and cert.L is not None and policy is not None:
        checks.append(_check_cross(cert, model, policy, pairs, u_grid, spec))
    if cert.V_o is not None:
        checks.append(_check_continuity(cert, model, pairs, spec))
    return VerificationReport(checks=checks, tolerance=spec.tolerance)


def _min_slack_update(best, slack, args):
    i = int(np.argmin(slack))
    if slack[i] < best[0]:
        return (float(slack[i]), args(i))
    return best


def _check_detectability(cert, model, pairs, u_grid, dw, spec):
    V = cert.V_o
    best = (np.inf, None)
    F = model.F
    E = model.E
    hmap = model.output_map
    for xs, xt in pairs:
        for u in u_grid:
            uu = np.full((len(xs), model.n_u), u)
            fx = nominal_step(model, xs, uu)
            ft = nominal_step(model, xt, uu)
            hx = np.atleast_2d(hmap(xs, uu))
            ht = np.atleast_2d(hmap(xt, uu))
            base_v = V.eval_batch(xs, xt)
            for d in dw:
                lhs = V.eval_batch(fx + d @ E.T, ft)
                dy = np.linalg.norm(hx - ht + d @ F.T, axis=-1)
                rhs = cert.rho_d * base_v + cert.sig_dw * np.linalg.norm(d) + cert.sig_dy * dy
                slack = rhs - lhs
                best = _min_slack_update(best, slack, lambda i, xs=xs, xt=xt, u=u, d=d: (
                    tuple(np.round(xs[i], 4)), tuple(np.round(xt[i], 4)), round(u, 3), tuple(d)))
    return CheckResult("detectability (V_o)", best[0], best[1])


def _check_stabilizability(cert, model, policy, pairs, u_grid, dw, spec):
    V = cert.V_s
    E = model.E
    best = (np.inf, None)
    for xs, xt in pairs:
        dv = xt - xs
        for u in u_grid:
            uu = np.full((len(xs), model.n_u), u)
            ut = uu + dv @ policy.K.T  # pi(xt, x, u) = u + K (xt - x)
            fx = nominal_step(model, xs, uu)
            ft = nominal_step(model, xt, ut)
            base_v = V.eval_batch(xs, xt)
            for d in dw:
                lhs = V.eval_batch(fx + d @ E.T, ft)
                rhs = cert.rho_s * base_v + cert.sig_sw * np.linalg.norm(d)
                slack = rhs - lhs
                best = _min_slack_update(best, slack, lambda i, xs=xs, xt=xt, u=u, d=d: (
                    tuple(np.round(xs[i], 4)), tuple(np.round(xt[i], 4)), round(u, 3), tuple(d)))
    return CheckResult("stabilizability (V_s)", best[0], best[1])


def _check_feedback_slope(cert, policy, pairs):
    best = (np.inf, None)
    for xs, xt in pairs:
        dev = np.linalg.norm((xt - xs) @ policy.K.T, axis=-1)
        slack = cert.sig_pi * np.linalg.norm(xt - xs, axis=-1) - dev
        best = _min_slack_update(best, slack, lambda i, xs=xs, xt=xt: (
            tuple(np.round(xs[i], 4)), tuple(np.round(xt[i], 4))))
    return CheckResult("feedback slope (sig_pi)", best[0], best[1])


def _check_observer(cert, model, pairs, u_grid, corners, spec):
    """V_o(fhat(xhat,u,y), f_w(x,u,w)) <= rho_o V_o(x, xhat) + sig_ow ||w||."""
    V = cert.V_o
    L = cert.L
    E, F = model.E, model.F
    hmap = model.output_map
    best = (np.inf, None)
    for xs, xh in pairs:  # xs true state, xh estimate
        for u in u_grid:
            uu = np.full((len(xs), model.n_u), u)
            f_true = nominal_step(model, xs, uu)
            f_hat = nominal_step(model, xh, uu)
            h_true = np.atleast_2d(hmap(xs, uu))
            h_hat = np.atleast_2d(hmap(xh, uu))
            base_v = V.eval_batch(xs, xh)
            for w in corners:
                innov = h_true + w @ F.T - h_hat
                lhs = V.eval_batch(f_hat + innov @ L.T, f_true + w @ E.T)
                rhs = cert.rho_o * base_v + cert.sig_ow * np.linalg.norm(w)
                slack = rhs - lhs
                best = _min_slack_update(best, slack, lambda i, xs=xs, xh=xh, u=u, w=w: (
                    tuple(np.round(xs[i], 4)), tuple(np.round(xh[i], 4)), round(u, 3), tuple(w)))
    return CheckResult("observer decrease (V_o)", best[0], best[1])


def _check_correction(cert, model, pairs, u_grid, corners, spec):
    V = cert.V_o
    L = cert.L
    F = model.F
    hmap = model.output_map
    best = (np.inf, None)
    w_bar = model.w_bar
    for xs, xh in pairs:
        for u in u_grid:
            uu = np.full((len(xs), model.n_u), u)
            h_true = np.atleast_2d(hmap(xs, uu))
            h_hat = np.atleast_2d(hmap(xh, uu))
            base_v = V.eval_batch(xs, xh)
            for w in corners:
                innov = h_true + w @ F.T - h_hat
                lhs = np.linalg.norm(innov @ L.T, axis=-1)
                rhs = cert.sig_oL * base_v + cert.sig_oLw * w_bar
                slack = rhs - lhs
                best = _min_slack_update(best, slack, lambda i, xs=xs, xh=xh, u=u, w=w: (
                    tuple(np.round(xs[i], 4)), tuple(np.round(xh[i], 4)), round(u, 3), tuple(w)))
    return CheckResult("correction bound (7b)", best[0], best[1])


def _check_cross(cert, model, policy, pairs, u_grid, spec):
    """Tube cross-propagation: nominal vs observer-updated estimate.

    V_s(f(xbar,ubar), fhat(xhat,u,y)) <= rho_s V_s(xbar,xhat)
        + sig_so V_o(xhat,x) + sig_sow w_bar
    with u = pi(xhat, xbar, ubar) and y measured on the true state x. The
    slack is affine in the estimation error magnitude e, so e in {0, e_max}
    with the worst-case alignment of x1 - xhat1 suffices; w3 at the box
    corners likewise.
    """
    V = cert.V_s
    Vo = cert.V_o
    L = cert.L
    best = (np.inf, None)
    w3s = np.array([-model.w_inf_bound, 0.0, model.w_inf_bound])
    # worst-case per-component deviation of the true state given V_o(xhat,x)<=e
    r1 = Vo.support(np.eye(model.n_x)[0])
    for xb, xh in pairs:  # xb nominal, xh estimate
        dv = xh - xb
        for u in u_grid:
            ub = np.full((len(xb), model.n_u), u)
            ureal = ub + dv @ policy.K.T
            f_bar = nominal_step(model, xb, ub)
            f_hat0 = nominal_step(model, xh, ureal)
            base_v = V.eval_batch(xb, xh)
            for e in (0.0, spec.e_max):
                for sgn in ((1.0,) if e == 0.0 else (-1.0, 1.0)):
                    for w3 in w3s:
                        innov = (sgn * e * r1 + w3) * np.ones((len(xb), 1))
                        lhs = V.eval_batch(f_hat0 + innov @ L.T, f_bar)
                        rhs = cert.rho_s * base_v + cert.sig_so * e + cert.sig_sow * model.w_bar
                        slack = rhs - lhs
                        best = _min_slack_update(best, slack, lambda i, xb=xb, xh=xh, u=u, e=e, w3=w3: (
                            tuple(np.round(xb[i], 4)), tuple(np.round(xh[i], 4)), round(u, 3), e, w3))
    return CheckResult("tube cross-propagation", best[0], best[1])


def _check_continuity(cert, model, pairs, spec):
    """|V_o(a, c) - V_o(b, c)| <= sig_d ||a - b|| on sampled triples."""
    V = cert.V_o
    best = (np.inf, None)
    for xa, xb in pairs:
        c = np.roll(xa, 1, axis=0)
        lhs = np.abs(V.eval_batch(xa, c) - V.eval_batch(xb, c))
        slack = cert.sig_d * np.linalg.norm(xa - xb, axis=-1) - lhs
        best = _min_slack_update(best, slack, lambda i, xa=xa, xb=xb, c=c: (
            tuple(np.round(xa[i], 4)), tuple(np.round(xb[i], 4)), tuple(np.round(c[i], 4))))
    return CheckResult("continuity (sig_d)", best[0], best[1])
