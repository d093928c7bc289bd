"""Uncertain discrete-time plant models, constraints, and tube feedback.

The plant family is

    x+ = f(x, u) + E w,    y = h(x, u) + F w,    ||w||_inf <= w_inf_bound,

where the nominal map f is obtained by RK4 discretization of a supplied
continuous-time vector field. All functions are pure and operate on plain
numpy arrays; batched leading dimensions are supported where noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class IntegrationError(RuntimeError):
    """RK4 produced a non-finite state."""


class DisturbanceBoundError(ValueError):
    """Disturbance sample lies outside the admissible box."""


@dataclass(frozen=True)
class MassSpringDamperParams:
    """Parameters of the nonlinear mass-spring-damper benchmark."""

    M: float = 1.0
    k0: float = 0.33
    h_d: float = 1.1

    def __post_init__(self):
        if self.M <= 0:
            raise ValueError(f"mass must be positive, got {self.M}")


def msd_dynamics(params: MassSpringDamperParams) -> Callable:
    """Continuous-time vector field of the mass-spring-damper.

    xdot1 = x2
    xdot2 = (-k0 * exp(-x1) * x1 - h_d * x2 + u) / M

    Returns a callable (x, u) -> xdot accepting batched (..., 2) states
    and (..., 1) inputs.
    """
    M, k0, h_d = params.M, params.k0, params.h_d

    def xdot(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x1 = x[..., 0]
        x2 = x[..., 1]
        force = u[..., 0] if u.ndim == x.ndim else u
        acc = (-k0 * np.exp(-x1) * x1 - h_d * x2 + force) / M
        return np.stack([x2, acc], axis=-1)

    return xdot


def msd_jacobian(params: MassSpringDamperParams) -> Callable:
    """Analytic Jacobians of the mass-spring-damper vector field.

    Returns a callable (x, u) -> (dfdx, dfdu) with shapes (..., 2, 2) and
    (..., 2, 1).
    """
    M, k0, h_d = params.M, params.k0, params.h_d

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        # d/dx1 of -k0*exp(-x1)*x1 = -k0*exp(-x1)*(1 - x1)
        a21 = -k0 * np.exp(-x1) * (1.0 - x1) / M
        zeros = np.zeros_like(x1)
        ones = np.ones_like(x1)
        dfdx = np.stack(
            [
                np.stack([zeros, ones], axis=-1),
                np.stack([a21, np.full_like(x1, -h_d / M)], axis=-1),
            ],
            axis=-2,
        )
        dfdu = np.stack([zeros, np.full_like(x1, 1.0 / M)], axis=-1)[..., None]
        return dfdx, dfdu

    return jac


@dataclass
class SystemModel:
    """Uncertain discrete-time system with affine disturbance entry.

    Attributes:
        n_x, n_u, n_y, n_w: state/input/output/disturbance dimensions.
        continuous_dynamics: vector field (x, u) -> xdot; discretized by RK4.
        dt: sample time in seconds.
        E: (n_x, n_w) disturbance-to-state matrix.
        F: (n_y, n_w) disturbance-to-output matrix.
        output_map: h(x, u) -> y, batched along leading axes.
        w_inf_bound: per-component disturbance magnitude (inf-norm box).
        continuous_jacobian: optional (x, u) -> (dfdx, dfdu) of the vector
            field; enables the closed-form RK4 chain rule.
        discrete_dynamics: optional direct discrete map overriding RK4
            (used for exactly specified test systems).
    """

    n_x: int
    n_u: int
    n_y: int
    n_w: int
    continuous_dynamics: Callable
    dt: float
    E: np.ndarray
    F: np.ndarray
    output_map: Callable
    w_inf_bound: float
    continuous_jacobian: Optional[Callable] = None
    discrete_dynamics: Optional[Callable] = None
    output_jacobian: Optional[Callable] = None
    fast_step: Optional[Callable] = None  # (x tuple, u tuple) -> x tuple, plain floats
    w_bar: float = field(init=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.w_inf_bound < 0:
            raise ValueError("w_inf_bound must be nonnegative")
        self.E = np.atleast_2d(np.asarray(self.E, dtype=float))
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        if self.E.shape != (self.n_x, self.n_w):
            raise ValueError(f"E must be {(self.n_x, self.n_w)}, got {self.E.shape}")
        if self.F.shape != (self.n_y, self.n_w):
            raise ValueError(f"F must be {(self.n_y, self.n_w)}, got {self.F.shape}")
        # 2-norm over-approximation of the inf-norm box.
        self.w_bar = self.w_inf_bound * np.sqrt(self.n_w)


def rk4_step(model: SystemModel, x: np.ndarray, u) -> np.ndarray:
    """One classical RK4 step of the continuous dynamics; the nominal f(x, u).

    Supports batched (..., n_x) states with matching (..., n_u) inputs.
    Raises IntegrationError if the result is non-finite.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = model.dt
    g = model.continuous_dynamics
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = g(x, u)
        k2 = g(x + 0.5 * h * k1, u)
        k3 = g(x + 0.5 * h * k2, u)
        k4 = g(x + h * k3, u)
        out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("RK4 step produced a non-finite state")
    return out


def nominal_step(model: SystemModel, x: np.ndarray, u) -> np.ndarray:
    """Nominal discrete map f(x, u): RK4 unless a direct map is supplied."""
    if model.discrete_dynamics is not None:
        out = np.asarray(model.discrete_dynamics(x, u), dtype=float)
        if not np.all(np.isfinite(out)):
            raise IntegrationError("discrete dynamics produced a non-finite state")
        return out
    return rk4_step(model, x, u)


def rk4_jacobian(model: SystemModel, x: np.ndarray, u):
    """Jacobians (A, B) = (df/dx, df/du) of the nominal discrete map.

    Uses the closed-form RK4 chain rule when the model carries an analytic
    continuous Jacobian; otherwise falls back to central finite differences
    on the discrete map. Supports batched inputs in the analytic path.
    """
    if model.discrete_dynamics is not None or model.continuous_jacobian is None:
        return _fd_jacobian(model, np.asarray(x, float), np.atleast_1d(np.asarray(u, float)))

    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = model.dt
    g = model.continuous_dynamics
    jac = model.continuous_jacobian
    eye = np.eye(model.n_x)

    k1 = g(x, u)
    G1x, G1u = jac(x, u)
    x2 = x + 0.5 * h * k1
    k2 = g(x2, u)
    G2x, G2u = jac(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = g(x3, u)
    G3x, G3u = jac(x3, u)
    x4 = x + h * k3
    G4x, G4u = jac(x4, u)

    K1x, K1u = G1x, G1u
    K2x = G2x @ (eye + 0.5 * h * K1x)
    K2u = G2x @ (0.5 * h * K1u) + G2u
    K3x = G3x @ (eye + 0.5 * h * K2x)
    K3u = G3x @ (0.5 * h * K2u) + G3u
    K4x = G4x @ (eye + h * K3x)
    K4u = G4x @ (h * K3u) + G4u

    A = eye + (h / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    B = (h / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    return A, B


def _fd_jacobian(model, x, u, eps=1e-6):
    n_x, n_u = model.n_x, model.n_u
    A = np.empty((n_x, n_x))
    B = np.empty((n_x, n_u))
    for i in range(n_x):
        d = np.zeros(n_x)
        d[i] = eps
        A[:, i] = (nominal_step(model, x + d, u) - nominal_step(model, x - d, u)) / (2 * eps)
    for j in range(n_u):
        d = np.zeros(n_u)
        d[j] = eps
        B[:, j] = (nominal_step(model, x, u + d) - nominal_step(model, x, u - d)) / (2 * eps)
    return A, B


def output_jacobian(model: SystemModel, x: np.ndarray, u) -> np.ndarray:
    """dh/dx of the output map; finite differences unless supplied."""
    if model.output_jacobian is not None:
        return np.atleast_2d(np.asarray(model.output_jacobian(x, u), dtype=float))
    eps = 1e-6
    x = np.asarray(x, dtype=float)
    C = np.empty((model.n_y, model.n_x))
    for i in range(model.n_x):
        d = np.zeros(model.n_x)
        d[i] = eps
        hi = np.atleast_1d(model.output_map(x + d, u))
        lo = np.atleast_1d(model.output_map(x - d, u))
        C[:, i] = (hi - lo) / (2 * eps)
    return C


def check_disturbance(model: SystemModel, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != model.n_w:
        raise DisturbanceBoundError(f"disturbance must have {model.n_w} components")
    if np.any(np.abs(w) > model.w_inf_bound + 1e-15):
        raise DisturbanceBoundError(
            f"||w||_inf = {np.max(np.abs(w)):.3g} exceeds bound {model.w_inf_bound:.3g}"
        )
    return w


def disturbed_step(model: SystemModel, x: np.ndarray, u, w) -> np.ndarray:
    """True one-step update f(x, u) + E w with an admissible disturbance."""
    w = check_disturbance(model, w)
    return nominal_step(model, x, u) + w @ model.E.T


def measure(model: SystemModel, x: np.ndarray, u, w) -> np.ndarray:
    """Noisy output h(x, u) + F w."""
    w = check_disturbance(model, w)
    y = np.asarray(model.output_map(x, u), dtype=float)
    return y + w @ model.F.T


@dataclass
class ConstraintSet:
    """Polytopic joint state/input constraints c_x^T x + c_u^T u <= b."""

    halfspaces: Sequence  # list of (c_x, c_u, b)

    def __post_init__(self):
        rows = []
        for c_x, c_u, b in self.halfspaces:
            c_x = np.atleast_1d(np.asarray(c_x, dtype=float))
            c_u = np.atleast_1d(np.asarray(c_u, dtype=float))
            if not (np.any(c_x != 0) or np.any(c_u != 0)):
                raise ValueError("constraint row with zero normal")
            rows.append((c_x, c_u, float(b)))
        self.halfspaces = rows
        self.C_x = np.array([r[0] for r in rows])
        self.C_u = np.array([r[1] for r in rows])
        self.b = np.array([r[2] for r in rows])

    @classmethod
    def from_box(cls, x_bounds, u_bounds) -> "ConstraintSet":
        """Box constraints as half-spaces, e.g. from_box([(-0.85, 0.85), (-2, 2)], [(-6, 6)])."""
        n_x = len(x_bounds)
        n_u = len(u_bounds)
        rows = []
        for i, (lo, hi) in enumerate(x_bounds):
            cx = np.zeros(n_x)
            cx[i] = 1.0
            rows.append((cx.copy(), np.zeros(n_u), hi))
            rows.append((-cx, np.zeros(n_u), -lo))
        for j, (lo, hi) in enumerate(u_bounds):
            cu = np.zeros(n_u)
            cu[j] = 1.0
            rows.append((np.zeros(n_x), cu.copy(), hi))
            rows.append((np.zeros(n_x), -cu, -lo))
        return cls(rows)

    @property
    def n_rows(self) -> int:
        return len(self.halfspaces)


def constraint_eval(Z: ConstraintSet, x, u) -> np.ndarray:
    """Per-row slack b - c_x^T x - c_u^T u; all >= 0 iff (x, u) in Z.

    Batched states/inputs of shape (B, n_x)/(B, n_u) yield (B, n_rows).
    """
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return Z.b - x @ Z.C_x.T - u @ Z.C_u.T


@dataclass
class FeedbackPolicy:
    """Tube feedback pi(xhat, xbar, ubar) = ubar + K (xhat - xbar)."""

    K: np.ndarray

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))

    @property
    def gain_norm(self) -> float:
        """Slope of the input-deviation bound: the induced 2-norm of K."""
        return float(np.linalg.norm(self.K, 2))


def apply_feedback(policy: FeedbackPolicy, xhat, xbar, ubar) -> np.ndarray:
    """Realized input ubar + K (xhat - xbar)."""
    xhat = np.asarray(xhat, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    ubar = np.atleast_1d(np.asarray(ubar, dtype=float))
    return ubar + policy.K @ (xhat - xbar)


def _msd_fast_step(params: MassSpringDamperParams, dt: float) -> Callable:
    """Pure-float RK4 step mirroring the numpy path's operation order."""
    from math import exp

    M, k0, h_d = params.M, params.k0, params.h_d

    def step(x, u):
        x1, x2 = x
        uu = u[0]

        def g(a, b):
            return b, (-k0 * exp(-a) * a - h_d * b + uu) / M

        k11, k12 = g(x1, x2)
        k21, k22 = g(x1 + 0.5 * dt * k11, x2 + 0.5 * dt * k12)
        k31, k32 = g(x1 + 0.5 * dt * k21, x2 + 0.5 * dt * k22)
        k41, k42 = g(x1 + dt * k31, x2 + dt * k32)
        return (x1 + (dt / 6.0) * (k11 + 2.0 * k21 + 2.0 * k31 + k41),
                x2 + (dt / 6.0) * (k12 + 2.0 * k22 + 2.0 * k32 + k42))

    return step


def make_msd_model(
    params: Optional[MassSpringDamperParams] = None,
    dt: float = 0.25,
    w_inf_bound: float = 0.01,
) -> SystemModel:
    """Mass-spring-damper instance: y = x1 + w3, E w = [dt*w1, dt*w2/M]."""
    params = params or MassSpringDamperParams()
    E = np.array([[dt, 0.0, 0.0], [0.0, dt / params.M, 0.0]])
    F = np.array([[0.0, 0.0, 1.0]])

    def h(x, u):
        x = np.asarray(x, dtype=float)
        return x[..., :1]

    return SystemModel(
        n_x=2,
        n_u=1,
        n_y=1,
        n_w=3,
        continuous_dynamics=msd_dynamics(params),
        dt=dt,
        E=E,
        F=F,
        output_map=h,
        w_inf_bound=w_inf_bound,
        continuous_jacobian=msd_jacobian(params),
        output_jacobian=lambda x, u: np.array([[1.0, 0.0]]),
        fast_step=_msd_fast_step(params, dt),
    )


def make_msd_fullstate_model(
    params: Optional[MassSpringDamperParams] = None,
    dt: float = 0.25,
) -> SystemModel:
    """Disturbance-free full-state variant (y = x) for nominal equivalence tests."""
    params = params or MassSpringDamperParams()

    def h(x, u):
        return np.asarray(x, dtype=float)

    return SystemModel(
        n_x=2,
        n_u=1,
        n_y=2,
        n_w=3,
        continuous_dynamics=msd_dynamics(params),
        dt=dt,
        E=np.zeros((2, 3)),
        F=np.zeros((2, 3)),
        output_map=h,
        w_inf_bound=0.0,
        continuous_jacobian=msd_jacobian(params),
        output_jacobian=lambda x, u: np.eye(2),
        fast_step=_msd_fast_step(params, dt),
    )
