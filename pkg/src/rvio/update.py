"""Inverse-depth visual update: triangulation, Jacobians, nullspace projection,
gating, QR compression, the EKF correction and stochastic cloning.

Window bookkeeping: ``window.frames[m]`` is the image index of frame ``m``
(``m = 0`` oldest) and ``window.poses[m - 1]`` relates frame ``m - 1`` to
frame ``m``.  A landmark is anchored in the camera frame of its first
observation ``a`` as ``(φ, ψ, ρ)`` and predicted in frame ``i`` through::

    h_i = C̄_i e(φ, ψ) + ρ p̄_i,     z_i = h_i[:2] / h_i[2]

where ``(C̄_i, p̄_i)`` map camera frame ``a`` into camera frame ``i``.
"""

import logging
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from . import so3
from .state import P_I, POSE_DIM, ROBO_DIM, TH_I, RelativePose, inject_error, marginalize_oldest, symmetrize

log = logging.getLogger(__name__)


class TriangulationError(ValueError):
    pass


@dataclass
class UpdateOptions:
    eps_pp: float = 1e-3
    eps_par: float = 0.01
    alpha: float = 0.05
    step_tol: float = 1e-8
    max_iters: int = 10
    min_track_length: int = 3


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)  # (frame index, 2-vector z)

    def frames(self):
        return [f for f, _ in self.observations]


@dataclass
class InverseDepthLandmark:
    phi: float
    psi: float
    rho: float

    def as_array(self):
        return np.array([self.phi, self.psi, self.rho])


@dataclass
class StackedResidual:
    r: np.ndarray
    H_x: np.ndarray
    R_diag: float
    dof: int = None

    def __post_init__(self):
        if self.dof is None:
            self.dof = len(self.r)
        if self.H_x.shape[0] != len(self.r):
            raise ValueError("residual and Jacobian row counts differ")


def bearing(phi, psi):
    cphi, sphi = np.cos(phi), np.sin(phi)
    return np.array([cphi * np.sin(psi), sphi, cphi * np.cos(psi)])


def bearing_jacobian(phi, psi):
    """``∂e/∂(φ, ψ)`` as a 3x2 matrix."""
    cphi, sphi = np.cos(phi), np.sin(phi)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    return np.array([[-sphi * spsi, cphi * cpsi],
                     [cphi, 0.0],
                     [-sphi * cpsi, -cphi * spsi]])


def projection_jacobian(h):
    """``H_p = ∂(h[:2]/h[2])/∂h``."""
    return np.array([[1.0, 0.0, -h[0] / h[2]],
                     [0.0, 1.0, -h[1] / h[2]]]) / h[2]


def _window_position(window, frame):
    try:
        return window.position_of(frame)
    except KeyError:
        raise IndexError(f"frame {frame} is outside the window {window.frames}") from None


def _imu_chain(window, a, b):
    """Rotations ``C_{n,a}`` and positions ``^{R_n} p_{R_a}`` for ``n = a..b``."""
    rots = [np.eye(3)]
    pos = [np.zeros(3)]
    for m in range(a + 1, b + 1):
        pose = window.poses[m - 1]
        Cm = so3.to_rotation(pose.q)
        rots.append(Cm @ rots[-1])
        pos.append(Cm @ (pos[-1] - pose.p))
    return rots, pos


def relative_pose_chain(window, extrinsics, first, i):
    """Rotation ``C̄`` (camera ``first`` -> camera ``i``) and translation ``p̄`` of camera ``first`` in camera ``i``.

    ``first`` and ``i`` are positions in ``window.frames``.
    """
    if not 0 <= first <= i < len(window.frames):
        raise IndexError(f"window positions ({first}, {i}) out of range")
    rots, pos = _imu_chain(window, first, i)
    R_ci = extrinsics.R_ci
    C_bar = R_ci @ rots[-1] @ R_ci.T
    p_bar = R_ci @ rots[-1] @ extrinsics.p_cam_in_imu + R_ci @ pos[-1] + extrinsics.p_imu_in_cam
    return C_bar, p_bar


def _track_geometry(track, window, extrinsics):
    """Window positions, normalized measurements and the (C̄, p̄) of every view."""
    positions = [_window_position(window, f) for f in track.frames()]
    if any(b <= a for a, b in zip(positions[:-1], positions[1:])):
        raise ValueError("track frames must be strictly increasing")
    z = np.array([np.asarray(obs, dtype=float) for _, obs in track.observations])
    a = positions[0]
    rots, pos = _imu_chain(window, a, positions[-1])
    R_ci = extrinsics.R_ci
    p_c = extrinsics.p_cam_in_imu
    C_bars, p_bars = [], []
    for m in positions:
        C_ia = rots[m - a]
        C_bars.append(R_ci @ C_ia @ R_ci.T)
        p_bars.append(R_ci @ C_ia @ p_c + R_ci @ pos[m - a] + extrinsics.p_imu_in_cam)
    return positions, z, rots, pos, np.array(C_bars), np.array(p_bars)


def _predict(lam, C_bars, p_bars):
    """Predicted h, projected z and ∂z/∂λ for all views."""
    phi, psi, rho = lam
    e = bearing(phi, psi)
    de = bearing_jacobian(phi, psi)
    h = C_bars @ e + rho * p_bars
    if np.any(h[:, 2] <= 1e-9):
        raise TriangulationError("landmark projects behind a camera")
    inv = 1.0 / h[:, 2]
    z_hat = h[:, :2] * inv[:, None]
    Hp = np.zeros((len(h), 2, 3))
    Hp[:, 0, 0] = inv
    Hp[:, 1, 1] = inv
    Hp[:, :, 2] = -z_hat * inv[:, None]
    J = np.empty((len(h), 2, 3))
    J[:, :, :2] = Hp @ (C_bars @ de)
    J[:, :, 2] = (Hp @ p_bars[:, :, None])[:, :, 0]
    return h, z_hat, J


def initial_bearing(z):
    """Bearing angles ``(φ, ψ)`` whose direction projects exactly onto ``z``."""
    u, v = z
    return np.arctan2(v, np.sqrt(u * u + 1.0)), np.arctan2(u, 1.0)


def parallax_ok(track, window, extrinsics, eps_par=0.01, geometry=None):
    """False when every view sits within ``eps_par`` metres of the anchor camera."""
    geometry = _track_geometry(track, window, extrinsics) if geometry is None else geometry
    p_bars = geometry[-1]
    return bool(np.any(np.linalg.norm(p_bars, axis=1) >= eps_par))


def triangulate(track, window, extrinsics, opts=None, geometry=None):
    """Gauss-Newton estimate of the inverse-depth landmark from a track.

    Starts at the anchor bearing with ``ρ = 0``.  All views, including the
    anchor, enter the least-squares cost.  Without parallax only the two
    bearing angles are refined.  A negative inverse depth is clamped to 0.
    """
    opts = UpdateOptions() if opts is None else opts
    if len(track.observations) < 2:
        raise TriangulationError("triangulation needs at least two observations")
    geometry = _track_geometry(track, window, extrinsics) if geometry is None else geometry
    _, z, _, _, C_bars, p_bars = geometry
    lam = np.array([*initial_bearing(z[0]), 0.0])
    has_parallax = np.any(np.linalg.norm(p_bars, axis=1) >= opts.eps_par)
    cols = 3 if has_parallax else 2
    for it in range(opts.max_iters):
        _, z_hat, J = _predict(lam, C_bars, p_bars)
        r = (z - z_hat).reshape(-1)
        A = J.reshape(-1, 3)[:, :cols]
        N = A.T @ A
        if it == 0:
            # conditioning is decided at the starting point, where ρ = 0
            if cols == 3 and np.linalg.cond(N) > 1e12:
                # inverse depth is not constrained: refine the bearing only
                cols = 2
                A = A[:, :2]
                N = A.T @ A
            if np.linalg.cond(N) > 1e12:
                raise TriangulationError("singular normal equations")
        try:
            step = np.linalg.solve(N, A.T @ r)
        except LinAlgError:
            raise TriangulationError("singular normal equations") from None
        lam[:cols] += step
        if lam[2] < 0.0:
            lam[2] = 0.0
        if np.linalg.norm(step) < opts.step_tol:
            break
    return InverseDepthLandmark(*lam)


def measurement_jacobians(track, landmark, window, extrinsics, eps_pp=1e-3, geometry=None):
    """Stacked residual ``r``, state Jacobian ``H_x`` and landmark Jacobian ``H_λ``.

    ``H_x`` spans the whole error state of a window with ``len(window)`` poses
    and is zero over the 24 robocentric columns.  Views whose measurement lies
    within ``eps_pp`` of the principal point are dropped.
    """
    geometry = _track_geometry(track, window, extrinsics) if geometry is None else geometry
    positions, z, rots, pos, C_bars, p_bars = geometry
    lam = landmark.as_array()
    phi, psi, rho = lam
    e = bearing(phi, psi)
    h, z_hat, J_lam = _predict(lam, C_bars, p_bars)

    a = positions[0]
    R_ci = extrinsics.R_ci
    # ρ-scaled landmark in each IMU frame n of the chain: Y_n = C_n (Y_{n-1} - ρ p_n)
    Y = np.array([rots[k] @ (R_ci.T @ e + rho * extrinsics.p_cam_in_imu) + rho * pos[k]
                  for k in range(len(rots))])
    # K_n = [C_{n,a}^T [Y_n]x, -ρ C_{n-1,a}^T] so that ∂h_i/∂(δθ_n, p̃_n) = R_ci C_{i,a} K_n
    K = np.zeros((len(rots), 3, POSE_DIM))
    for k in range(1, len(rots)):
        K[k, :, :3] = rots[k].T @ so3.skew(Y[k])
        K[k, :, 3:] = -rho * rots[k - 1].T

    dim = ROBO_DIM + POSE_DIM * len(window)
    keep = np.linalg.norm(z, axis=1) >= eps_pp
    rows = int(keep.sum())
    if rows == 0:
        raise ValueError(f"feature {track.feature_id}: every view is too close to the principal point")
    r = np.empty(2 * rows)
    H_x = np.zeros((2 * rows, dim))
    H_l = np.empty((2 * rows, 3))
    out = 0
    for view, m in enumerate(positions):
        if not keep[view]:
            continue
        sl = slice(2 * out, 2 * out + 2)
        r[sl] = z[view] - z_hat[view]
        H_l[sl] = J_lam[view]
        k = m - a
        if k > 0:
            Hp = projection_jacobian(h[view])
            block = (Hp @ R_ci @ rots[k]) @ K[1:k + 1].transpose(1, 0, 2).reshape(3, -1)
            col0 = ROBO_DIM + POSE_DIM * a  # pose of frame a + 1 sits at window slot a
            H_x[sl, col0:col0 + POSE_DIM * k] = block
        out += 1
    return r, H_x, H_l


def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0
    rr = np.hypot(a, b)
    return a / rr, b / rr


def nullspace_project(r, H_x, H_l, parallax_ok=True, R_diag=None):
    """Eliminate the landmark columns with Givens rotations.

    With parallax all three columns of ``H_λ`` are zeroed and ``2n - 3`` rows
    survive; in the low-parallax case only the two bearing columns are
    eliminated and ``2n - 2`` rows survive.
    """
    ncols = 3 if parallax_ok else 2
    nrows = len(r)
    if nrows < 4:
        raise ValueError(f"nullspace projection needs at least 4 rows, got {nrows}")
    # only the columns of H_x that carry entries need to be rotated
    used = np.flatnonzero(np.any(H_x != 0.0, axis=0))
    # rotate [H_λ | r | H_x] in place, column by column from the bottom up
    M = np.hstack([H_l[:, :ncols], r[:, None], H_x[:, used]]).astype(float, copy=True)
    for col in range(ncols):
        for row in range(nrows - 1, col, -1):
            c, s = _givens(M[row - 1, col], M[row, col])
            if s == 0.0:
                continue
            upper = M[row - 1].copy()
            M[row - 1] = c * upper + s * M[row]
            M[row] = -s * upper + c * M[row]
    tail = M[ncols:]
    H_out = np.zeros((nrows - ncols, H_x.shape[1]))
    H_out[:, used] = tail[:, ncols + 1:]
    return StackedResidual(tail[:, ncols].copy(), H_out, R_diag, nrows - ncols)


def mahalanobis_gate(res, cov, alpha=0.05):
    """Chi-square test of the projected residual against the prior covariance."""
    used = np.flatnonzero(np.any(res.H_x != 0.0, axis=0))
    H = res.H_x[:, used]
    S = H @ cov[np.ix_(used, used)] @ H.T + res.R_diag * np.eye(len(res.r))
    try:
        d2 = res.r @ cho_solve(cho_factor(S), res.r)
    except LinAlgError:
        log.warning("innovation covariance is not positive definite; rejecting feature")
        return False
    return bool(d2 <= chi2_threshold(alpha, res.dof))


@lru_cache(maxsize=None)
def chi2_threshold(alpha, dof):
    """``1 - alpha`` quantile of the chi-square distribution with ``dof`` degrees of freedom."""
    return float(chi2.ppf(1.0 - alpha, dof))


def stack(residuals):
    if not residuals:
        raise ValueError("nothing to stack")
    return StackedResidual(np.concatenate([x.r for x in residuals]),
                           np.vstack([x.H_x for x in residuals]),
                           residuals[0].R_diag, sum(x.dof for x in residuals))


def qr_compress(res):
    """Thin QR of the window columns when there are at least as many rows as window states."""
    n_win = res.H_x.shape[1] - ROBO_DIM
    if n_win == 0 or len(res.r) < n_win:
        return res
    Q, T = np.linalg.qr(res.H_x[:, ROBO_DIM:], mode="reduced")
    H = np.zeros((n_win, res.H_x.shape[1]))
    H[:, ROBO_DIM:] = T
    return StackedResidual(Q.T @ res.r, H, res.R_diag, n_win)


def ekf_update(state, res):
    """EKF correction with the Joseph-form covariance update."""
    P = state.cov
    H = res.H_x
    R = res.R_diag * np.eye(len(res.r))
    PHt = P @ H.T
    S = H @ PHt + R
    try:
        K = cho_solve(cho_factor(S), PHt.T).T
    except LinAlgError:
        raise LinAlgError("innovation covariance is not invertible") from None
    out = inject_error(state, K @ res.r)
    IKH = np.eye(state.dim) - K @ H
    out.cov = symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
    # the preintegrated sums refer to the pre-update velocity
    out.preint = None
    return out


def augment(state, frame=None):
    """Clone the current relative pose into the window (marginalizing first if full)."""
    if len(state.window) >= state.window.n_max:
        state = marginalize_oldest(state)
    out = state.copy()
    out.window.poses.append(RelativePose(state.q_rel.copy(), state.p_rel.copy()))
    out.window.frames.append(state.window.frames[-1] + 1 if frame is None else frame)
    n = state.dim
    idx = np.r_[TH_I.start:TH_I.stop, P_I.start:P_I.stop]
    P = np.empty((n + POSE_DIM, n + POSE_DIM))
    P[:n, :n] = state.cov
    P[:n, n:] = state.cov[:, idx]
    P[n:, :n] = state.cov[idx, :]
    P[n:, n:] = state.cov[np.ix_(idx, idx)]
    out.cov = P
    return out


@dataclass
class UpdateStats:
    candidates: int = 0
    triangulation_failures: int = 0
    rejected: int = 0
    accepted: int = 0
    rows: int = 0
    # (feature_id, anchor frame, landmark) of every accepted track
    landmarks: list = field(default_factory=list)


def update_with_tracks(state, tracks, extrinsics, noise, opts=None):
    """Process all completed tracks of one epoch in a single stacked update.

    Every track is gated against the same prior covariance.  Observations
    outside the window are ignored; tracks left with fewer than
    ``opts.min_track_length`` views are skipped.
    """
    opts = UpdateOptions() if opts is None else opts
    stats = UpdateStats()
    sigma2 = noise.sigma_im ** 2
    accepted = []
    in_window = set(state.window.frames)
    for track in tracks:
        obs = [(f, z) for f, z in track.observations if f in in_window]
        if len(obs) < max(2, opts.min_track_length):
            continue
        trk = FeatureTrack(track.feature_id, obs)
        stats.candidates += 1
        try:
            geo = _track_geometry(trk, state.window, extrinsics)
            lam = triangulate(trk, state.window, extrinsics, opts, geo)
            r, H_x, H_l = measurement_jacobians(trk, lam, state.window, extrinsics, opts.eps_pp, geo)
            ok = parallax_ok(trk, state.window, extrinsics, opts.eps_par, geo)
            res = nullspace_project(r, H_x, H_l, ok, sigma2)
        except ValueError as exc:
            log.debug("feature %s skipped: %s", track.feature_id, exc)
            stats.triangulation_failures += 1
            continue
        if not mahalanobis_gate(res, state.cov, opts.alpha):
            stats.rejected += 1
            continue
        accepted.append(res)
        stats.landmarks.append((track.feature_id, obs[0][0], lam))
    if not accepted:
        return state, stats
    stats.accepted = len(accepted)
    res = qr_compress(stack(accepted))
    stats.rows = len(res.r)
    return ekf_update(state, res), stats
