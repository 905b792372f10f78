"""Observability analysis of the linearized robocentric model.

The analysis state appends landmark positions (expressed in R_k) to the 24
robocentric error states.  The transition over ``[t_k, t_l]`` is assembled
block by block from its closed-form integrals, evaluated by trapezoidal
quadrature on a densely sampled state history, and cross-checked against
direct integration of ``Φ̇ = F Φ``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import subspace_angles

from . import so3
from .composition import composition_jacobian
from .propagation import transition_and_noise
from .state import BA, BG, GRAV, P_G, P_I, ROBO_DIM, TH_G, TH_I, VEL, new_state

log = logging.getLogger(__name__)

RANK_TOL = 1e-8
LANDMARK_DIM = 3


@dataclass
class StateHistory:
    """Robocentric state samples over an interval starting at the reference frame R_k.

    ``C[j]`` rotates R_k into the IMU frame at ``t[j]`` (so ``C[0] = I``),
    ``p[j]`` is the IMU position in R_k, ``v``/``a``/``omega`` are the body
    velocity, kinematic acceleration and rate, and ``gravity`` is the gravity
    reaction (up vector) in R_k.
    """

    t: np.ndarray
    C: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    omega: np.ndarray
    gravity: np.ndarray
    p_global: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_global: np.ndarray = field(default_factory=so3.identity)

    def __len__(self):
        return len(self.t)

    def landmark_in_reference(self, point_global):
        """Express a point given in G in the reference frame R_k."""
        Cg = so3.to_rotation(self.q_global)
        return Cg @ np.asarray(point_global, float) + self.p_global

    def perturbed(self, rng, angle=0.1, dist=0.1):
        """A nearby linearization point: every sample perturbed by up to ``angle`` rad / ``dist`` m."""
        n = len(self.t)
        C = np.array([so3.to_rotation(so3.from_rotvec(rng.uniform(-1, 1, 3) * angle / np.sqrt(3))) @ c
                      for c in self.C])
        C[0] = np.eye(3)
        dp = rng.uniform(-1, 1, (n, 3)) * dist / np.sqrt(3)
        dp[0] = 0.0
        return StateHistory(self.t.copy(), C, self.p + dp,
                            self.v + rng.uniform(-1, 1, (n, 3)) * dist / np.sqrt(3),
                            self.a.copy(), self.omega.copy(),
                            self.gravity + rng.uniform(-1, 1, 3) * dist / np.sqrt(3),
                            self.p_global + rng.uniform(-1, 1, 3) * dist / np.sqrt(3),
                            so3.multiply(so3.from_rotvec(rng.uniform(-1, 1, 3) * angle / np.sqrt(3)),
                                         self.q_global))


def history_from_truth(truth, start, stop):
    """Slice simulator truth (expressed in G) into a history anchored at sample ``start``."""
    sl = slice(start, stop)
    R0 = truth.R[start]
    C = np.einsum("kji,jl->kil", truth.R[sl], R0)  # R_tau^T R_0
    return StateHistory(
        t=truth.t[sl] - truth.t[start],
        C=C,
        p=(truth.p[sl] - truth.p[start]) @ R0,
        v=truth.v_body[sl].copy(),
        a=truth.a_body[sl].copy(),
        omega=truth.omega[sl].copy(),
        gravity=R0.T @ truth.gravity_up,
        p_global=-R0.T @ truth.p[start],
        q_global=so3.from_rotation(R0.T),
    )


# ---------------------------------------------------------------------------
# transition matrices


@dataclass
class AnalyticTransition:
    phi: np.ndarray  # 24x24
    dt: float

    def psi(self, n_landmarks=1):
        n = ROBO_DIM + LANDMARK_DIM * n_landmarks
        out = np.eye(n)
        out[:ROBO_DIM, :ROBO_DIM] = self.phi
        return out


class _Integrals:
    """Cumulative quadratures shared by all transition blocks of a history."""

    def __init__(self, h):
        if len(h) < 2:
            raise ValueError("history needs at least two samples")
        t = h.t
        Ct = np.transpose(h.C, (0, 2, 1))
        self.t = t
        self.S1 = cumulative_trapezoid(Ct, t, axis=0, initial=0)        # ∫ C^T
        self.S2 = cumulative_trapezoid(self.S1, t, axis=0, initial=0)   # ∫∫ C^T
        self.S3 = cumulative_trapezoid(self.S2, t, axis=0, initial=0)   # ∫∫∫ C^T
        skew_v = np.array([so3.skew(v) for v in h.v])
        skew_rv = np.array([so3.skew(c.T @ v) for c, v in zip(h.C, h.v)])
        self.A = cumulative_trapezoid(skew_rv @ self.S1, t, axis=0, initial=0)   # ∫ [C^T v]x ∫C^T
        B1 = cumulative_trapezoid(Ct @ skew_v, t, axis=0, initial=0)
        self.B = cumulative_trapezoid(B1, t, axis=0, initial=0)                 # ∫∫ C^T [v]x
        self.D = cumulative_trapezoid(Ct @ skew_v, t, axis=0, initial=0)        # ∫ C^T [v]x


def analytic_phi(history, index=-1, _cache=None):
    """Closed-form Φ(l, k) between the first sample and sample ``index``."""
    h = history
    q = _Integrals(h) if _cache is None else _cache
    j = index if index >= 0 else len(h) + index
    dt = h.t[j] - h.t[0]
    C = h.C[j]
    g = h.gravity
    I3 = np.eye(3)
    gx = so3.skew(g)
    phi = np.eye(ROBO_DIM)
    phi[TH_I, TH_I] = C
    phi[TH_I, BG] = -C @ q.S1[j]
    phi[P_I, GRAV] = -0.5 * dt * dt * I3
    phi[P_I, TH_I] = -so3.skew(h.p[j] + 0.5 * g * dt * dt)
    phi[P_I, VEL] = dt * I3
    phi[P_I, BG] = q.A[j] + gx @ q.S3[j] - q.B[j]
    phi[P_I, BA] = -q.S2[j]
    phi[VEL, GRAV] = -C * dt
    phi[VEL, TH_I] = -C @ gx * dt
    phi[VEL, VEL] = C
    phi[VEL, BG] = C @ gx @ q.S2[j] - C @ q.D[j]
    phi[VEL, BA] = -C @ q.S1[j]
    return AnalyticTransition(phi, dt)


def _F_at(h, j):
    return transition_and_noise(so3.from_rotation(h.C[j]), h.v[j], h.gravity, h.omega[j], 1.0).F


def numeric_phi(history, method="rk4"):
    """Φ over the whole history by integrating ``Φ̇ = FΦ`` along the samples.

    ``euler`` multiplies the per-step ``I + Fδt`` exactly as the filter does;
    ``rk4`` takes one classical Runge-Kutta step per pair of intervals using
    the samples as stage points (so it needs an odd number of samples).
    """
    h = history
    phi = np.eye(ROBO_DIM)
    if method == "euler":
        for j in range(len(h) - 1):
            phi = (np.eye(ROBO_DIM) + _F_at(h, j) * (h.t[j + 1] - h.t[j])) @ phi
        return phi
    if method != "rk4":
        raise ValueError(f"unknown method {method!r}")
    if len(h) % 2 == 0:
        raise ValueError("rk4 integration needs an odd number of samples")
    for j in range(0, len(h) - 2, 2):
        step = h.t[j + 2] - h.t[j]
        F0, F1, F2 = _F_at(h, j), _F_at(h, j + 1), _F_at(h, j + 2)
        k1 = F0 @ phi
        k2 = F1 @ (phi + 0.5 * step * k1)
        k3 = F1 @ (phi + 0.5 * step * k2)
        k4 = F2 @ (phi + step * k3)
        phi = phi + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return phi


# ---------------------------------------------------------------------------
# measurement rows


def default_landmarks(history, count=1, depth=6.0, spread=1.0, seed=0):
    """Landmarks (in R_k) that stay in front of the sensor over the whole history.

    They are placed ``depth`` metres along the average optical axis (the
    IMU z axis) from the centroid of the path, jittered by ``spread``.
    """
    axis = np.einsum("kji,j->ki", history.C, np.array([0.0, 0.0, 1.0])).mean(axis=0)
    axis /= np.linalg.norm(axis)
    centre = history.p.mean(axis=0) + depth * axis
    rng = np.random.Generator(np.random.Philox(seed))
    pts = centre + rng.uniform(-spread, spread, size=(count, 3))
    for L in pts:
        for j in range(len(history)):
            if history.C[j][2] @ (L - history.p[j]) <= 0.0:
                raise ValueError("history is too long for a single landmark to stay in view")
    return pts


def projection_jacobian(x):
    return np.array([[1.0, 0.0, -x[0] / x[2]],
                     [0.0, 1.0, -x[1] / x[2]]]) / x[2]


def bearing_rows(history, j, landmark):
    """``H_l`` of the bearing measurement (camera and IMU frames coincide)."""
    C = history.C[j]
    d = landmark - history.p[j]
    x = C @ d
    if x[2] <= 0:
        raise ValueError("landmark is behind the sensor")
    H = np.zeros((3, ROBO_DIM + LANDMARK_DIM))
    H[:, TH_I] = so3.skew(d) @ C.T
    H[:, P_I] = -np.eye(3)
    H[:, ROBO_DIM:] = np.eye(3)
    return projection_jacobian(x) @ C @ H


def composition_rows(history, j, landmark):
    """``[L_l, N_l]``: the landmark expressed in the new reference frame after composition."""
    C = history.C[j]
    p_new = C @ (landmark - history.p[j])
    L = np.zeros((3, ROBO_DIM + LANDMARK_DIM))
    L[:, TH_I] = so3.skew(p_new)
    L[:, P_I] = -C
    L[:, ROBO_DIM:] = C
    return L


def composition_matrix(history, j, landmark):
    """The 27x27 ``V̌_l`` mapping the error at l (in R_k) to the error after composition."""
    s = new_state(gravity=history.gravity)
    s.q_global = history.q_global
    s.p_global = history.p_global
    s.q_rel = so3.from_rotation(history.C[j])
    s.p_rel = history.p[j]
    s.v = history.v[j]
    V = np.zeros((ROBO_DIM + LANDMARK_DIM, ROBO_DIM + LANDMARK_DIM))
    V[:ROBO_DIM, :ROBO_DIM] = composition_jacobian(s)
    V[ROBO_DIM:] = composition_rows(history, j, landmark)
    return V


# ---------------------------------------------------------------------------
# reports


def claimed_nullspace(n_landmarks=1):
    """The nine directions: global orientation, global position, joint translation."""
    n = ROBO_DIM + LANDMARK_DIM * n_landmarks
    N = np.zeros((n, 9))
    N[TH_G, 0:3] = np.eye(3)
    N[P_G, 3:6] = np.eye(3)
    N[P_I, 6:9] = np.eye(3)
    for i in range(n_landmarks):
        N[ROBO_DIM + 3 * i:ROBO_DIM + 3 * i + 3, 6:9] = np.eye(3)
    return N


def frame_rotation_directions(history, landmarks):
    """Three further null directions: rotating R_k about its origin.

    ``δθ_I = e``, ``g̃ = -[g]x e`` and ``p̃_L = -[p_L]x e`` leave every
    measurement row unchanged because the first reference pose has no
    position offset and carries no estimate of its own.
    """
    landmarks = np.atleast_2d(landmarks)
    n = ROBO_DIM + LANDMARK_DIM * len(landmarks)
    N = np.zeros((n, 3))
    N[TH_I] = np.eye(3)
    N[GRAV] = -so3.skew(history.gravity)
    for i, L in enumerate(landmarks):
        N[ROBO_DIM + 3 * i:ROBO_DIM + 3 * i + 3] = -so3.skew(L)
    return N


def scale_direction(history, landmarks, index=0):
    """Direction along which a metric rescaling moves the error state at sample ``index``."""
    landmarks = np.atleast_2d(landmarks)
    u = np.zeros(ROBO_DIM + LANDMARK_DIM * len(landmarks))
    u[P_G] = history.p_global
    u[P_I] = history.p[index]
    u[VEL] = history.v[index]
    u[BA] = -history.a[index]
    for i, L in enumerate(landmarks):
        u[ROBO_DIM + 3 * i:ROBO_DIM + 3 * i + 3] = L
    return u


@dataclass
class ObservabilityReport:
    M: np.ndarray
    singular_values: np.ndarray
    rank: int
    nullity: int
    nullspace: np.ndarray
    claimed_residual: float
    scale_residual: float
    frame_rotation_residual: float
    motion_label: str = ""
    pinned: int = 0

    @property
    def effective_nullity(self):
        """Nullity not counting columns zeroed by pinning."""
        return self.nullity - self.pinned

    def summary(self):
        return {
            "rank": self.rank,
            "nullity": self.nullity,
            "effective_nullity": self.effective_nullity,
            "claimed_residual": self.claimed_residual,
            "scale_residual": self.scale_residual,
            "frame_rotation_residual": self.frame_rotation_residual,
            "motion": self.motion_label,
        }


def numeric_nullspace(M, tol=RANK_TOL):
    U, s, Vt = np.linalg.svd(M)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return s, rank, Vt[rank:].T


def build_observability_matrix(history, landmarks, steps=10, include_composition=False,
                               tol=RANK_TOL, motion_label="", pin_reference_orientation=False):
    """Stack the measurement rows at ``steps + 1`` evenly spaced samples of the history.

    ``landmarks`` are positions in R_k (one row per landmark).  With
    ``include_composition`` each block row is ``[0 | I] V̌_l Ψ(l, k)``, the
    landmark re-expressed in the frame produced by composition.

    ``pin_reference_orientation`` zeroes the ``δθ_I`` columns, i.e. treats the
    relative orientation at ``t_k`` as known (as the filter does right after
    composition).  This is a diagnostic; the default keeps the full model.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    nl = len(landmarks)
    n = ROBO_DIM + LANDMARK_DIM * nl
    cache = _Integrals(history)
    idx = np.unique(np.linspace(0, len(history) - 1, steps + 1).round().astype(int))
    blocks = []
    for j in idx:
        psi = analytic_phi(history, j, cache).psi(nl)
        for i, L in enumerate(landmarks):
            rows = composition_rows(history, j, L) if include_composition else bearing_rows(history, j, L)
            full = np.zeros((rows.shape[0], n))
            full[:, :ROBO_DIM] = rows[:, :ROBO_DIM]
            full[:, ROBO_DIM + 3 * i:ROBO_DIM + 3 * i + 3] = rows[:, ROBO_DIM:]
            blocks.append(full @ psi)
    M = np.vstack(blocks)
    if pin_reference_orientation:
        M[:, TH_I] = 0.0
    s, rank, null = numeric_nullspace(M, tol)
    normM = s[0] if s.size else 1.0
    N = claimed_nullspace(nl)
    u = scale_direction(history, landmarks)
    R = frame_rotation_directions(history, landmarks)
    if pin_reference_orientation:
        # the pinned columns are trivially null; report them as part of the claimed set
        N = np.hstack([N, np.eye(n)[:, TH_I]])
        R = np.eye(n)[:, TH_I]
    return ObservabilityReport(
        M=M,
        singular_values=s,
        rank=rank,
        nullity=n - rank,
        nullspace=null,
        claimed_residual=float(np.linalg.norm(M @ N, 2) / normM),
        scale_residual=float(np.linalg.norm(M @ u) / np.linalg.norm(u)),
        frame_rotation_residual=float(np.linalg.norm(M @ R, 2) / (normM * np.linalg.norm(R, 2))),
        motion_label=motion_label,
        pinned=3 if pin_reference_orientation else 0,
    )


def bearing_factor(history, j):
    """``Γ`` blocks of the bearing row at sample ``j``: ``M_l = Π [0, 0, Γ1, Γ2, -I, Γ3, Γ4, Γ5, I]``."""
    phi = analytic_phi(history, j).phi
    C = history.C[j]
    return {
        "G1": -phi[P_I, GRAV],
        "G3": -phi[P_I, VEL],
        "G4": -phi[P_I, BG],
        "G5": -phi[P_I, BA],
        "C": C,
    }


def velocity_accel_combination(history, j):
    """``Γ3 v_k - Γ5 a_k``: the part of ``M_l u`` contributed by velocity and acceleration."""
    G = bearing_factor(history, j)
    return G["G3"] @ history.v[0] - G["G5"] @ history.a[0]


def printed_composed_blocks(history, j, landmark):
    """The landmark block row of ``V̌ Ψ`` written with the closed-form blocks."""
    phi = analytic_phi(history, j).phi
    C = history.C[j]
    pl = so3.skew(C @ (landmark - history.p[j]))
    return {
        "93": -C @ phi[P_I, GRAV],
        "94": pl @ phi[TH_I, TH_I] - C @ phi[P_I, TH_I],
        "95": -C,
        "96": -C @ phi[P_I, VEL],
        "97": pl @ phi[TH_I, BG] - C @ phi[P_I, BG],
        "98": -C @ phi[P_I, BA],
        "99": C,
    }


def max_principal_angle(A, B):
    """Largest principal angle (rad) between two column spaces; π/2 if dimensions differ."""
    if A.shape[1] != B.shape[1]:
        return np.pi / 2
    if A.shape[1] == 0:
        return 0.0
    return float(np.max(subspace_angles(A, B)))


# ---------------------------------------------------------------------------
# motion classes


def motion_classifier(truth, tol=1e-6):
    """Label a trajectory: ``stationary`` or a ``+``-joined subset of
    ``no_rotation``, ``constant_acceleration``, ``planar``; ``generic`` otherwise.
    """
    w = np.asarray(truth.omega)
    a = np.asarray(truth.a_body)
    v = np.asarray(truth.v_body)
    still_w = np.max(np.linalg.norm(w, axis=1)) < tol
    if still_w and np.max(np.linalg.norm(a, axis=1)) < tol and np.max(np.linalg.norm(v, axis=1)) < tol:
        return "stationary"
    labels = []
    if still_w:
        labels.append("no_rotation")
    if np.max(np.linalg.norm(a - a.mean(axis=0), axis=1)) < tol * max(1.0, np.abs(a).max()):
        labels.append("constant_acceleration")
    # planar: one fixed rotation axis and no translation along it
    if still_w:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = w[np.argmax(np.linalg.norm(w, axis=1))]
        axis = axis / np.linalg.norm(axis)
    axes_g = np.einsum("kij,j->ki", truth.R, axis)
    if (np.max(np.linalg.norm(np.cross(w, axis), axis=1)) < tol
            and np.max(np.linalg.norm(axes_g - axes_g[0], axis=1)) < tol
            and np.ptp(truth.p @ axes_g[0]) < tol * max(1.0, np.abs(truth.p).max())):
        labels.append("planar")
    return "+".join(labels) if labels else "generic"
