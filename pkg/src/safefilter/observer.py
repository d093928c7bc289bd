"""State estimation with certified error bounds.

A Luenberger-style observer provides the backbone estimate; its bound is
propagated by the offline and online scalar recursions. A moving-horizon
estimator solved over the buffered input/output window provides a competing
candidate whose optimal cost doubles as its error bound. Runtime validity
checks gate the MHE candidate; the smallest valid bound wins.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import nlp
from .lyapunov import (
    Certificate,
    bound_predict,
    bound_update_offline,
    bound_update_online,
    reconstruct_disturbance,
)
from .model import IntegrationError, SystemModel, nominal_step, output_jacobian, rk4_jacobian


class EstimationError(RuntimeError):
    """No usable estimate candidate."""


class Source(enum.Enum):
    MHE = "mhe"
    LUENBERGER = "luenberger"


@dataclass
class EstimateBundle:
    """State estimate with a certified error bound V_o(xhat, x) <= e_bar."""

    xhat: np.ndarray
    e_bar: float
    source: Source
    k: int

    def __post_init__(self):
        self.xhat = np.asarray(self.xhat, dtype=float)
        if self.e_bar < 0:
            raise ValueError("error bound must be nonnegative")


@dataclass
class MheBuffer:
    """Ring buffer of the last M (u, y) pairs plus the anchor bundle.

    The anchor is the *selected* bundle from the step of the oldest buffered
    pair; bundles for the last M+1 steps are retained so the anchor stays
    aligned as the window slides.
    """

    M: int
    data: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    bundles: List[EstimateBundle] = field(default_factory=list)

    def push(self, bundle: EstimateBundle, u, y):
        """Record the selected bundle at step k and the (u_k, y_k) pair."""
        self.bundles.append(bundle)
        self.data.append((np.atleast_1d(np.asarray(u, dtype=float)),
                          np.atleast_1d(np.asarray(y, dtype=float))))
        if len(self.data) > self.M:
            self.data.pop(0)
            self.bundles.pop(0)

    @property
    def horizon(self) -> int:
        return len(self.data)

    @property
    def anchor(self) -> EstimateBundle:
        if not self.bundles:
            raise EstimationError("MHE buffer is empty")
        return self.bundles[0]


def luenberger_update(model: SystemModel, cert: Certificate, xhat, u, y) -> np.ndarray:
    """f(xhat, u) + L (y - h(xhat, u)); zero innovation gives pure prediction."""
    xhat = np.asarray(xhat, dtype=float)
    innov = np.atleast_1d(np.asarray(y, dtype=float)) - np.atleast_1d(model.output_map(xhat, u))
    return nominal_step(model, xhat, u) + cert.L @ innov


@dataclass
class MheSolution:
    xhat: np.ndarray
    e_hat: float
    status: nlp.Status
    iterations: int
    z: np.ndarray
    kkt: float
    hessian: Optional[np.ndarray] = None


def build_mhe_problem(
    model: SystemModel,
    cert: Certificate,
    buf: MheBuffer,
    smoothing: float = 1e-3,
    z0: Optional[np.ndarray] = None,
) -> nlp.NlpProblem:
    """Single-shooting transcription of the moving-horizon program.

    Decision variables: the window-start state estimate followed by the
    M_k disturbance vectors. The dynamics and output equalities are
    eliminated by forward propagation, leaving an unconstrained problem.
    Norms are smoothed as sqrt(||v||^2 + eps^2) - eps so the program is
    smooth at the (common) corner optima; the smoothed cost lower-bounds
    the true cost by at most a few multiples of eps.
    """
    M_k = buf.horizon
    if M_k == 0:
        raise EstimationError("MHE buffer is empty")
    n_x, n_w = model.n_x, model.n_w
    n = n_x + M_k * n_w
    anchor = buf.anchor
    us = [d[0] for d in buf.data]
    ys = [d[1] for d in buf.data]
    us_arr = np.asarray(us, dtype=float).reshape(M_k, -1)
    ys_arr = np.asarray(ys, dtype=float).reshape(M_k, -1)
    rho = cert.rho_d
    weights = rho ** np.arange(M_k - 1, -1, -1, dtype=float)
    const_term = rho ** M_k * anchor.e_bar
    anchor_w = rho ** M_k * cert.sig_d
    eps = smoothing
    E, F = model.E, model.F
    w_bar = model.w_bar
    fast = model.fast_step if model.discrete_dynamics is None else None
    us_fast = [tuple(float(v) for v in u) for u in us]

    def _chain(z):
        """States of the window rollout, (M_k + 1, n_x)."""
        xa = z[:n_x]
        ws = z[n_x:].reshape(M_k, n_w)
        Ews = ws @ E.T
        states = np.empty((M_k + 1, n_x))
        try:
            if fast is not None:
                s = tuple(float(v) for v in xa)
                states[0] = s
                for t in range(M_k):
                    s = fast(s, us_fast[t])
                    s = (s[0] + Ews[t, 0], s[1] + Ews[t, 1])
                    states[t + 1] = s
                if not np.all(np.isfinite(states)):
                    raise nlp.NumericalError("window rollout diverged")
            else:
                s = xa
                states[0] = s
                for t in range(M_k):
                    s = nominal_step(model, s, us[t]) + Ews[t]
                    states[t + 1] = s
        except (IntegrationError, OverflowError) as exc:
            # line-search trial left the integrable region; retryable
            raise nlp.NumericalError(str(exc)) from exc
        return states, ws

    def _terms(z):
        states, ws = _chain(z)
        youts = np.asarray(model.output_map(states[:M_k], us_arr), dtype=float).reshape(M_k, -1)
        resids = youts + ws @ F.T - ys_arr
        sw = np.sqrt(np.einsum("ij,ij->i", ws, ws) + eps * eps)
        sr = np.sqrt(np.einsum("ij,ij->i", resids, resids) + eps * eps)
        da = z[:n_x] - anchor.xhat
        sa = float(np.sqrt(da @ da + eps * eps))
        cost = (const_term + anchor_w * (sa - eps)
                + float(weights @ (cert.sig_dw * (w_bar + sw - eps)
                                   + cert.sig_dy * (sr - eps))))
        return states, ws, resids, sw, sr, da, sa, cost

    def objective(z):
        return _terms(z)[-1]

    empty = np.zeros(0)
    empty_jac = np.zeros((0, n))

    def eval_all(z):
        """Fused cost and gradient off a single rollout."""
        states, ws, resids, sw, sr, da, sa, cost = _terms(z)
        grad = np.empty(n)
        g_w = (weights * cert.sig_dw / sw)[:, None] * ws
        g_r = (weights * cert.sig_dy / sr)[:, None] * resids
        gw_full = g_w + g_r @ F
        if model.continuous_jacobian is not None and model.discrete_dynamics is None:
            As, _ = rk4_jacobian(model, states[:M_k], us_arr)
        else:
            As = np.stack([rk4_jacobian(model, states[t], us[t])[0] for t in range(M_k)])
        adj = np.zeros(n_x)
        for t in range(M_k - 1, -1, -1):
            C = output_jacobian(model, states[t], us[t])
            grad[n_x + t * n_w:n_x + (t + 1) * n_w] = E.T @ adj + gw_full[t]
            adj = As[t].T @ adj + C.T @ g_r[t]
        grad[:n_x] = adj + (anchor_w / sa) * da
        return cost, grad, empty, empty_jac, empty, empty_jac

    def gradient(z):
        return eval_all(z)[1]

    def eval_vals(z):
        return objective(z), empty, empty

    x0 = z0 if z0 is not None else np.concatenate([anchor.xhat, np.zeros(M_k * n_w)])
    return nlp.NlpProblem(n_vars=n, objective=objective, gradient=gradient,
                          x0=np.asarray(x0, dtype=float), eval_all=eval_all,
                          eval_vals=eval_vals, name=f"mhe[{M_k}]")


def mhe_true_cost(model: SystemModel, cert: Certificate, buf: MheBuffer, z: np.ndarray) -> float:
    """Unsmoothed program cost at z; a valid error bound for the estimate."""
    M_k = buf.horizon
    n_x, n_w = model.n_x, model.n_w
    anchor = buf.anchor
    rho = cert.rho_d
    xa = z[:n_x]
    ws = z[n_x:].reshape(M_k, n_w)
    s = xa
    tot = rho ** M_k * (anchor.e_bar + cert.sig_d * float(np.linalg.norm(xa - anchor.xhat)))
    for t in range(M_k):
        u_t, y_t = buf.data[t]
        resid = np.atleast_1d(model.output_map(s, u_t)) + model.F @ ws[t] - y_t
        w = rho ** (M_k - t - 1)
        tot += w * (cert.sig_dw * (model.w_bar + float(np.linalg.norm(ws[t])))
                    + cert.sig_dy * float(np.linalg.norm(resid)))
        s = nominal_step(model, s, u_t) + model.E @ ws[t]
    return tot


def mhe_propagate(model: SystemModel, buf: MheBuffer, z: np.ndarray) -> np.ndarray:
    """Terminal state of the window rollout: the MHE estimate itself."""
    n_x, n_w = model.n_x, model.n_w
    s = z[:n_x]
    ws = z[n_x:].reshape(buf.horizon, n_w)
    for t in range(buf.horizon):
        s = nominal_step(model, s, buf.data[t][0]) + model.E @ ws[t]
    return s


def mhe_solve(
    model: SystemModel,
    cert: Certificate,
    buf: MheBuffer,
    opts: Optional[nlp.SolveOptions] = None,
    z0: Optional[np.ndarray] = None,
    smoothing: float = 1e-3,
    B0: Optional[np.ndarray] = None,
) -> MheSolution:
    """Solve the window program; the returned bound is the true cost at the
    solution, valid for any feasible point of the underlying program.

    Raises EstimationError on solver failure (iteration cap per the paper's
    setup, or a numerical error); the caller falls back to the Luenberger
    candidate in that case.
    """
    problem = build_mhe_problem(model, cert, buf, smoothing=smoothing, z0=z0)
    opts = opts or nlp.SolveOptions(opt_tol=1e-6, max_iter=1000)
    try:
        res = nlp.solve(problem, opts, B0=B0)
    except nlp.NumericalError as exc:
        raise EstimationError(f"MHE solve failed: {exc}") from exc
    if res.status is not nlp.Status.OPTIMAL:
        raise EstimationError(f"MHE solve did not converge: {res.status.value}")
    xhat = mhe_propagate(model, buf, res.x)
    e_hat = mhe_true_cost(model, cert, buf, res.x)
    return MheSolution(xhat=xhat, e_hat=e_hat, status=res.status,
                       iterations=res.iterations, z=res.x, kkt=res.kkt,
                       hessian=res.hessian)


def mhe_validity_check(
    cert: Certificate,
    e_hat_mhe: float,
    correction_norm: float,
    prior_bounds,
    w_bar: float,
) -> bool:
    """Runtime robustness conditions for accepting the MHE candidate.

    The correction (deviation from the one-step prediction of the previous
    estimate) must respect the observer correction bound, and the MHE bound
    must stay inside the prediction envelope of the last validated bounds.
    Both checks are non-strict.
    """
    if not prior_bounds:
        return False
    prev = prior_bounds[-1]
    if correction_norm > cert.sig_oL * prev + cert.sig_oLw * w_bar:
        return False
    for i, e_prior in enumerate(reversed(list(prior_bounds))):
        if e_hat_mhe > bound_predict(cert, e_prior, i + 1, w_bar):
            return False
    return True


def select_estimate(
    offline: Optional[float],
    online: Optional[float],
    mhe: Optional[float],
    xhat_luen: Optional[np.ndarray],
    xhat_mhe: Optional[np.ndarray],
    k: int,
) -> EstimateBundle:
    """Smallest-bound selection; ties prefer the MHE candidate.

    The Luenberger state carries the min of the offline/online bounds; the
    MHE state is adopted exactly when its bound attains the overall min.
    """
    luen_candidates = [b for b in (offline, online) if b is not None]
    if not luen_candidates and mhe is None:
        raise EstimationError("no estimate candidates available")
    e_luen = min(luen_candidates) if luen_candidates else np.inf
    if mhe is not None and xhat_mhe is not None and mhe <= e_luen:
        return EstimateBundle(xhat=xhat_mhe, e_bar=float(mhe), source=Source.MHE, k=k)
    if xhat_luen is None:
        raise EstimationError("no estimate candidates available")
    return EstimateBundle(xhat=xhat_luen, e_bar=float(e_luen), source=Source.LUENBERGER, k=k)


class Observer:
    """Sequential estimator state machine for one closed-loop run.

    Owns the MHE buffer and the current bundle; `advance` consumes the
    applied input and fresh measurement and produces the next bundle.
    The true state never enters this class.
    """

    def __init__(self, model: SystemModel, cert: Certificate, xhat0, e_bar0: float,
                 M: int, use_mhe: bool = True, mhe_opts: Optional[nlp.SolveOptions] = None,
                 smoothing: float = 1e-3):
        self.model = model
        self.cert = cert
        self.M = M
        self.use_mhe = use_mhe and M > 0
        self.mhe_opts = mhe_opts or nlp.SolveOptions(opt_tol=1e-6, max_iter=1000)
        self.smoothing = smoothing
        self.buffer = MheBuffer(M=M)
        self.bundle = EstimateBundle(xhat=np.asarray(xhat0, dtype=float),
                                     e_bar=float(e_bar0), source=Source.LUENBERGER, k=0)
        self._warm: Optional[np.ndarray] = None
        self._warm_B: Optional[np.ndarray] = None
        self.last_mhe_iterations = 0
        self.mhe_selected_steps = 0
        self.mhe_invalid_steps = 0

    def advance(self, u, y) -> EstimateBundle:
        """Update from (u_k, y_k): returns the selected bundle for step k+1."""
        model, cert = self.model, self.cert
        xhat, e_bar, k = self.bundle.xhat, self.bundle.e_bar, self.bundle.k
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))

        innov = y - np.atleast_1d(model.output_map(xhat, u))
        correction = cert.L @ innov
        xhat_next = nominal_step(model, xhat, u) + correction
        offline = bound_update_offline(cert, e_bar, model.w_bar)
        try:
            w_hat = reconstruct_disturbance(model, correction)
            online = bound_update_online(cert, e_bar, model.w_bar,
                                         float(np.linalg.norm(w_hat)),
                                         float(np.linalg.norm(innov)))
        except Exception:
            online = None

        old_oldest_u = self.buffer.data[0][0] if self.buffer.data else None
        old_M = self.buffer.horizon
        self.buffer.push(self.bundle, u, y)

        mhe_bound = None
        xhat_mhe = None
        if self.use_mhe:
            z0 = self._shifted_warm(old_oldest_u, old_M)
            B0 = self._warm_B if (z0 is not None and self._warm_B is not None
                                  and len(z0) == len(self._warm_B)) else None
            try:
                sol = mhe_solve(model, cert, self.buffer, opts=self.mhe_opts,
                                z0=z0, smoothing=self.smoothing, B0=B0)
                self.last_mhe_iterations = sol.iterations
                corr = float(np.linalg.norm(sol.xhat - nominal_step(model, xhat, u)))
                if mhe_validity_check(cert, sol.e_hat, corr, [e_bar], model.w_bar):
                    mhe_bound, xhat_mhe = sol.e_hat, sol.xhat
                else:
                    self.mhe_invalid_steps += 1
                self._warm = sol.z
                self._warm_B = sol.hessian
            except EstimationError:
                self._warm = None
                self._warm_B = None

        bundle = select_estimate(offline, online, mhe_bound, xhat_next, xhat_mhe, k + 1)
        if bundle.source is Source.MHE:
            self.mhe_selected_steps += 1
        self.bundle = bundle
        return bundle

    def _shifted_warm(self, old_oldest_u, old_M: int) -> Optional[np.ndarray]:
        """Shift the previous MHE solution one step forward as a warm start."""
        if self._warm is None:
            return None
        n_x, n_w = self.model.n_x, self.model.n_w
        prev_M = (len(self._warm) - n_x) // n_w
        if prev_M != old_M:
            return None
        M_k = self.buffer.horizon
        xa = self._warm[:n_x]
        ws = self._warm[n_x:].reshape(prev_M, n_w)
        if M_k == prev_M + 1:
            # window grew; same anchor, one fresh disturbance slot
            return np.concatenate([xa, ws.ravel(), np.zeros(n_w)])
        if M_k == prev_M and old_oldest_u is not None:
            # window slid; advance the start state through the dropped stage
            xa_new = nominal_step(self.model, xa, old_oldest_u) + self.model.E @ ws[0]
            return np.concatenate([xa_new, ws[1:].ravel(), np.zeros(n_w)])
        return None
