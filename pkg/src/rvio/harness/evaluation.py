"""Pose errors, RMSE and NEES against ground truth, with optional alignment."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import so3

log = logging.getLogger(__name__)

ALIGNMENTS = ("none", "yaw_position", "se3")


@dataclass
class Trajectory:
    """Poses at timestamps ``t``: JPL quaternions G -> body and body positions in G.

    ``cov_theta``/``cov_pos`` are the optional 3x3 marginals of the global
    orientation and position errors (orientation error defined by
    ``q = δq ⊗ q̂``).
    """

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    cov_theta: np.ndarray = None
    cov_pos: np.ndarray = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.q) == len(self.p)):
            raise ValueError("t, q and p must have the same length")
        if self.cov_theta is not None:
            self.cov_theta = np.asarray(self.cov_theta, dtype=float).reshape(-1, 3, 3)
        if self.cov_pos is not None:
            self.cov_pos = np.asarray(self.cov_pos, dtype=float).reshape(-1, 3, 3)

    @classmethod
    def from_run(cls, result):
        return cls(np.array(result.t), np.array(result.q), np.array(result.p),
                   np.array(result.cov_theta), np.array(result.cov_pos))

    @classmethod
    def from_truth(cls, truth, stride=1):
        idx = np.arange(0, len(truth.t), stride)
        q = np.array([so3.from_rotation(truth.R[k].T) for k in idx])
        return cls(truth.t[idx], q, truth.p[idx])

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Trajectory(self.t[idx], self.q[idx], self.p[idx], pick(self.cov_theta), pick(self.cov_pos))


def finite_mean(x):
    """Mean of the finite entries (singular-covariance epochs are NaN); NaN when there are none."""
    x = np.asarray(x, float)
    x = x[np.isfinite(x)]
    return float(np.mean(x)) if len(x) else float("nan")


@dataclass
class EvalResult:
    t: np.ndarray
    orientation_error_deg: np.ndarray
    position_error: np.ndarray
    nees_orientation: np.ndarray
    nees_position: np.ndarray
    timing: dict = field(default_factory=dict)

    @property
    def rmse_orientation_deg(self):
        return float(np.sqrt(np.mean(self.orientation_error_deg ** 2)))

    @property
    def rmse_position(self):
        return float(np.sqrt(np.mean(self.position_error ** 2)))

    def average_nees(self, skip=0.0):
        keep = self.t >= self.t[0] + skip
        return finite_mean(self.nees_orientation[keep]), finite_mean(self.nees_position[keep])

    def summary(self, skip=0.0):
        n_ori, n_pos = self.average_nees(skip)
        return {
            "rmse_orientation_deg": self.rmse_orientation_deg,
            "rmse_position_m": self.rmse_position,
            "nees_orientation": n_ori,
            "nees_position": n_pos,
        }


def match(est_t, ref_t, tol=None):
    """Nearest-neighbour index pairs (i_est, i_ref) with |Δt| <= tol (half the reference spacing)."""
    est_t = np.asarray(est_t, float)
    ref_t = np.asarray(ref_t, float)
    if tol is None:
        tol = 0.5 * np.median(np.diff(ref_t)) if len(ref_t) > 1 else 0.0
    k = np.clip(np.searchsorted(ref_t, est_t), 1, max(len(ref_t) - 1, 1))
    left = np.clip(k - 1, 0, len(ref_t) - 1)
    right = np.clip(k, 0, len(ref_t) - 1)
    pick = np.where(np.abs(ref_t[left] - est_t) <= np.abs(ref_t[right] - est_t), left, right)
    ok = np.abs(ref_t[pick] - est_t) <= tol + 1e-12
    return np.flatnonzero(ok), pick[ok]


def umeyama(src, dst, with_scale=False):
    """Least-squares ``R, t, s`` with ``dst ≈ s R src + t`` (closed form via SVD)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    S = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(S)
    D = np.eye(src.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1, -1] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(d) @ D) / np.mean(np.sum(xs ** 2, axis=1))) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def align(est, ref, method="none", up=(0.0, 0.0, 1.0)):
    """Rigidly move ``est`` onto ``ref`` (matched sample for sample).

    ``yaw_position`` only rotates about ``up`` (the gravity direction in the
    reference frame) and translates; ``se3`` is a full rigid alignment.
    """
    if method not in ALIGNMENTS:
        raise ValueError(f"unknown alignment {method!r}")
    if method == "none":
        return est
    if method == "se3":
        R, t, _ = umeyama(est.p, ref.p)
    else:
        up = np.asarray(up, float)
        up = up / np.linalg.norm(up)
        # rotate so that `up` is the z axis, solve a planar problem, rotate back
        B = so3.to_rotation(so3.from_rotvec(_rotvec_between(up, np.array([0.0, 0.0, 1.0]))))
        a = est.p @ B.T
        b = ref.p @ B.T
        R2, _, _ = umeyama(a[:, :2], b[:, :2])
        Rz = np.eye(3)
        Rz[:2, :2] = R2
        R = B.T @ Rz @ B
        t = ref.p.mean(axis=0) - R @ est.p.mean(axis=0)
    p = est.p @ R.T + t
    # C(q) maps G -> body; the aligned frame is x' = R x + t
    q = np.array([so3.from_rotation(so3.to_rotation(qi) @ R.T) for qi in est.q])
    cov_pos = None if est.cov_pos is None else R @ est.cov_pos @ R.T
    return Trajectory(est.t, q, p, est.cov_theta, cov_pos)


def _rotvec_between(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.zeros(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return np.pi * perp / np.linalg.norm(perp)
    return axis / s * np.arctan2(s, c)


def orientation_error(q_est, q_true):
    """Error vector δθ with ``q_true = δq ⊗ q_est`` (matches the filter's error definition)."""
    return so3.to_rotvec(so3.multiply(q_true, so3.inverse(q_est)))


def nees(err, cov):
    """``eᵀ P⁻¹ e``; NaN when the covariance is singular."""
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.nan
    y = np.linalg.solve(c, err)
    return float(y @ y)


def evaluate(est, truth, method="none", up=(0.0, 0.0, 1.0), tol=None):
    """Per-epoch errors of ``est`` against ``truth`` (both :class:`Trajectory`)."""
    i_est, i_ref = match(est.t, truth.t, tol)
    if len(i_est) < 2:
        raise ValueError("fewer than 2 matched poses")
    e = est.subset(i_est)
    r = truth.subset(i_ref)
    e = align(e, r, method, up)
    n = len(e.t)
    ori = np.zeros(n)
    pos = np.zeros(n)
    n_ori = np.full(n, np.nan)
    n_pos = np.full(n, np.nan)
    for k in range(n):
        dth = orientation_error(e.q[k], r.q[k])
        dp = r.p[k] - e.p[k]
        ori[k] = np.degrees(np.linalg.norm(dth))
        pos[k] = np.linalg.norm(dp)
        if e.cov_theta is not None:
            n_ori[k] = 0.0 if not dth.any() else nees(dth, e.cov_theta[k])
        if e.cov_pos is not None:
            n_pos[k] = 0.0 if not dp.any() else nees(dp, e.cov_pos[k])
    return EvalResult(e.t, ori, pos, n_ori, n_pos)
