"""Certified benchmark preset for the mass-spring-damper study.

The decay rates and the reported slope constants come with the benchmark;
the quadratic function matrices and gains below were synthesized offline
(grid-constrained LMIs over a box slightly larger than the constraint set,
so the inequalities also hold wherever the estimate can sit) and are
confirmed by the in-package grid verifier. Slopes not fixed by the
benchmark are the smallest values our verifier accepts, rounded up.
"""

from __future__ import annotations

import numpy as np

from .lyapunov import Certificate
from .model import ConstraintSet, MassSpringDamperParams, SystemModel, make_msd_model

MSD_P_O = [[4.523316, -1.703715], [-1.703715, 1.863074]]
MSD_P_S = [[2.184339, 0.422539], [0.422539, 0.337448]]
MSD_K = [[-4.177781, -2.003713]]
MSD_L = [[1.107002], [0.431636]]

MSD_CERT_VALUES = {
    "rho_d": 0.74,
    "rho_o": 0.67,
    "rho_s": 0.78,
    "sig_ow": 2.25,
    "sig_so": 1.04,
    "sig_sow": 2.23,
    "sig_dw": 2.999,
    "sig_dy": 2.92,
    "sig_d": 2.3141,
    "sig_oL": 0.69,
    "sig_oLw": 0.686,
    "sig_sw": 0.3772,
    "sig_pi": 4.6335,
}

MSD_X_BOUNDS = [(-0.85, 0.85), (-2.0, 2.0)]
MSD_U_BOUNDS = [(-6.0, 6.0)]


def msd_model(dt: float = 0.25, w_inf_bound: float = 0.01,
              params: MassSpringDamperParams | None = None) -> SystemModel:
    return make_msd_model(params=params, dt=dt, w_inf_bound=w_inf_bound)


def msd_certificate() -> Certificate:
    return Certificate(P_o=np.array(MSD_P_O), P_s=np.array(MSD_P_S),
                       K=np.array(MSD_K), L=np.array(MSD_L), **MSD_CERT_VALUES)


def msd_constraints() -> ConstraintSet:
    return ConstraintSet.from_box(MSD_X_BOUNDS, MSD_U_BOUNDS)
