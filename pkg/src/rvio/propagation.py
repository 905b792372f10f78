"""IMU-driven mean and covariance propagation between two images.

The IMU pose is tracked relative to the reference frame R_k, so the mean
update splits into a quaternion integration and two preintegrated sums
``Δp``, ``Δv`` that only depend on the (bias-corrected) IMU readings::

    p_rel      = v_k Δt - ½ g Δt² + Δp
    R_k v      = v_k - g Δt + Δv
    v (body)   = C(q_rel) · R_k v

The covariance is propagated per IMU interval with ``Φ = I + F δt`` and the
additive term ``G Σ Gᵀ δt``; the window block only sees the compound Φ.
"""

from dataclasses import dataclass

import numpy as np

from . import so3
from .state import BA, BG, GRAV, P_I, ROBO_DIM, TH_I, VEL, symmetrize


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class Preintegral:
    """Running sums for the current epoch.

    ``v0``/``p0`` are the velocity (in R_k) and position at which the sums
    started; they are the epoch-start values unless an update happened in
    the middle of an epoch.
    """

    delta_p: np.ndarray
    delta_v: np.ndarray
    dt_total: float
    v0: np.ndarray
    p0: np.ndarray

    @classmethod
    def start(cls, state):
        return cls(np.zeros(3), np.zeros(3), 0.0,
                   so3.to_rotation(state.q_rel).T @ state.v, state.p_rel.copy())

    def copy(self):
        return Preintegral(self.delta_p.copy(), self.delta_v.copy(), self.dt_total,
                           self.v0.copy(), self.p0.copy())


@dataclass
class TransitionBlocks:
    F: np.ndarray
    phi: np.ndarray
    G: np.ndarray
    dt: float


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("empty IMU batch")
    t = np.array([s.t for s in batch])
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("IMU timestamps must be strictly increasing")


def integrate_quaternion(q, gyro_samples, b_g, hold=False):
    """Integrate ``q̇ = ½Ω(ω_m - b_g)q`` over the span of ``gyro_samples``.

    Each sample interval uses a constant rate.  By default that rate is the
    average of the two endpoint samples; ``hold=True`` uses the leading sample
    only, which is exact for piecewise-constant rates.  A single sample spans
    no time and returns ``q`` unchanged.
    """
    _check_batch(gyro_samples)
    b_g = np.asarray(b_g, dtype=float)
    q = so3.normalize(q)
    for s0, s1 in zip(gyro_samples[:-1], gyro_samples[1:]):
        w = s0.gyro if hold else 0.5 * (s0.gyro + s1.gyro)
        q = so3.integrate_constant_rate(q, w - b_g, s1.t - s0.t)
    return q


def transition_and_noise(q_rel, v, gravity, omega, dt):
    """Continuous F, discrete Φ = I + Fδt and noise Jacobian G on one IMU interval.

    ``omega`` is the bias-corrected rate; noise columns of G are ordered
    ``[n_g, n_wg, n_a, n_wa]``.
    """
    C = so3.to_rotation(q_rel)
    I3 = np.eye(3)
    F = np.zeros((ROBO_DIM, ROBO_DIM))
    F[TH_I, TH_I] = -so3.skew(omega)
    F[TH_I, BG] = -I3
    F[P_I, TH_I] = -C.T @ so3.skew(v)
    F[P_I, VEL] = C.T
    F[VEL, GRAV] = -C
    F[VEL, TH_I] = -so3.skew(C @ gravity)
    F[VEL, VEL] = -so3.skew(omega)
    F[VEL, BG] = -so3.skew(v)
    F[VEL, BA] = -I3

    G = np.zeros((ROBO_DIM, 12))
    G[TH_I, 0:3] = -I3
    G[VEL, 0:3] = -so3.skew(v)
    G[VEL, 6:9] = -I3
    G[BG, 3:6] = I3
    G[BA, 9:12] = I3
    return TransitionBlocks(F, np.eye(ROBO_DIM) + F * dt, G, dt)


def _run(state, batch, noise, with_cov):
    _check_batch(batch)
    out = state.copy()
    pre = Preintegral.start(state) if state.preint is None else state.preint.copy()
    if with_cov:
        Sigma = noise.imu_covariance()
        P = out.cov
        Pxx = P[:ROBO_DIM, :ROBO_DIM]
        Pxw = P[:ROBO_DIM, ROBO_DIM:]
        phi_total = np.eye(ROBO_DIM)

    q = out.q_rel
    g = out.gravity
    for s0, s1 in zip(batch[:-1], batch[1:]):
        dt = s1.t - s0.t
        w0 = s0.gyro - out.bg
        w1 = s1.gyro - out.bg
        w_mid = 0.5 * (w0 + w1)
        if with_cov:
            # Jacobians at the estimate at the start of the interval
            v_now = so3.to_rotation(q) @ (pre.v0 - g * pre.dt_total + pre.delta_v)
            blocks = transition_and_noise(q, v_now, g, w_mid, dt)
            phi = blocks.phi
            GQ = blocks.G @ Sigma @ blocks.G.T * dt
            Pxx = phi @ Pxx @ phi.T + GQ
            phi_total = phi @ phi_total

        q_next = so3.integrate_constant_rate(q, w_mid, dt)
        a0 = so3.to_rotation(q).T @ (s0.accel - out.ba)
        a1 = so3.to_rotation(q_next).T @ (s1.accel - out.ba)
        a_mid = 0.5 * (a0 + a1)
        pre.delta_p = pre.delta_p + pre.delta_v * dt + 0.5 * a_mid * dt * dt
        pre.delta_v = pre.delta_v + a_mid * dt
        pre.dt_total += dt
        q = q_next

    T = pre.dt_total
    v_ref = pre.v0 - g * T + pre.delta_v
    out.q_rel = q
    out.p_rel = pre.p0 + pre.v0 * T - 0.5 * g * T * T + pre.delta_p
    out.v = so3.to_rotation(q) @ v_ref
    out.clock = batch[-1].t
    out.preint = pre
    if with_cov:
        P = P.copy()
        P[:ROBO_DIM, :ROBO_DIM] = symmetrize(Pxx)
        P[:ROBO_DIM, ROBO_DIM:] = phi_total @ Pxw
        P[ROBO_DIM:, :ROBO_DIM] = P[:ROBO_DIM, ROBO_DIM:].T
        out.cov = P
    return out


def propagate_mean(state, batch):
    """Mean propagation over ``batch``; biases stay at their current estimates."""
    return _run(state, batch, None, with_cov=False)


def propagate_covariance(state, batch, noise):
    """Covariance propagation over ``batch``; the mean is left as it was.

    The transition is evaluated along the mean trajectory integrated in
    lockstep, which this function recomputes internally.
    """
    out = state.copy()
    out.cov = _run(state, batch, noise, with_cov=True).cov
    return out


def propagate(state, batch, noise):
    """Mean and covariance propagation in one pass."""
    return _run(state, batch, noise, with_cov=True)
