"""Shift of the frame of reference to the newest IMU frame.

After the update at image k+1 the IMU pose relative to R_k becomes the new
reference R_{k+1}::

    q_G' = q_rel ⊗ q_G,   p_G' = C(q_rel)(p_G - p_rel),   g' = C(q_rel) g

and the relative pose is reset to the origin.  Velocity and biases are
already expressed in the IMU frame and do not change.
"""

import numpy as np

from . import so3
from .state import BA, BG, GRAV, P_G, P_I, ROBO_DIM, TH_G, TH_I, VEL, symmetrize


def composition_jacobian(state):
    """24x24 ``V`` of the robocentric block, evaluated with the post-composition ``p_G'`` and ``g'``."""
    C = so3.to_rotation(state.q_rel)
    p_new = C @ (state.p_global - state.p_rel)
    g_new = C @ state.gravity
    I3 = np.eye(3)
    V = np.zeros((ROBO_DIM, ROBO_DIM))
    V[TH_G, TH_G] = C
    V[TH_G, TH_I] = I3
    V[P_G, P_G] = C
    V[P_G, TH_I] = so3.skew(p_new)
    V[P_G, P_I] = -C
    V[GRAV, GRAV] = C
    V[GRAV, TH_I] = so3.skew(g_new)
    V[VEL, VEL] = I3
    V[BG, BG] = I3
    V[BA, BA] = I3
    return V


def compose_mean(state):
    C = so3.to_rotation(state.q_rel)
    out = state.copy()
    out.q_global = so3.multiply(state.q_rel, state.q_global)
    out.p_global = C @ (state.p_global - state.p_rel)
    out.gravity = C @ state.gravity
    out.q_rel = so3.identity()
    out.p_rel = np.zeros(3)
    out.epoch = state.epoch + 1
    out.preint = None
    return out


def compose_covariance(state):
    """``P <- U P U^T`` with ``U = diag(V, I)``; the mean is left untouched."""
    V = composition_jacobian(state)
    P = state.cov
    n = ROBO_DIM
    out = state.copy()
    Q = np.empty_like(P)
    Q[:n, :n] = V @ P[:n, :n] @ V.T
    Q[:n, n:] = V @ P[:n, n:]
    Q[n:, :n] = Q[:n, n:].T
    Q[n:, n:] = P[n:, n:]
    out.cov = symmetrize(Q)
    # the reset relative pose carries no uncertainty
    out.cov[TH_I, :] = 0.0
    out.cov[:, TH_I] = 0.0
    out.cov[P_I, :] = 0.0
    out.cov[:, P_I] = 0.0
    return out


def compose(state):
    """Mean and covariance composition (the Jacobian uses the pre-composition estimate)."""
    out = compose_mean(state)
    out.cov = compose_covariance(state).cov
    return out
