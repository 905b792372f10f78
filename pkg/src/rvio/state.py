"""Robocentric filter state, covariance bookkeeping and initialization.

Error-state layout (24 robocentric entries followed by 6 per window pose)::

    [δθ_G, p̃_G, g̃, δθ_I, p̃_I, ṽ, b̃_g, b̃_a, (δθ_n, p̃_n) oldest -> newest]

``q_global`` rotates the global frame G into the current reference frame R_k,
``p_global`` is the position of G in R_k and ``gravity`` is expressed in R_k.
``q_rel``/``p_rel`` take R_k to the current IMU frame, ``v`` is the IMU
velocity expressed in the IMU frame.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import so3

# error-state slices
TH_G = slice(0, 3)
P_G = slice(3, 6)
GRAV = slice(6, 9)
TH_I = slice(9, 12)
P_I = slice(12, 15)
VEL = slice(15, 18)
BG = slice(18, 21)
BA = slice(21, 24)
ROBO_DIM = 24
POSE_DIM = 6

DEFAULT_GRAVITY = 9.81


def pose_slice(n):
    """Error-state slice of the n-th window pose (0 = oldest)."""
    start = ROBO_DIM + POSE_DIM * n
    return slice(start, start + POSE_DIM)


@dataclass
class NoiseConfig:
    """Continuous-time IMU noise densities and the (normalized) image noise."""

    sigma_g: float = 1.122e-4
    sigma_wg: float = 5.6323e-6
    sigma_a: float = 5.0119e-4
    sigma_wa: float = 3.9811e-5
    sigma_im: float = 1.5 / 460.0

    def __post_init__(self):
        for name in ("sigma_g", "sigma_wg", "sigma_a", "sigma_wa", "sigma_im"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def imu_covariance(self):
        """Diagonal 12x12 covariance of ``[n_g, n_wg, n_a, n_wa]``."""
        return np.diag(np.repeat([self.sigma_g ** 2, self.sigma_wg ** 2,
                                  self.sigma_a ** 2, self.sigma_wa ** 2], 3))


@dataclass
class CameraImuExtrinsics:
    q_cam_imu: np.ndarray = field(default_factory=so3.identity)
    p_imu_in_cam: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q_cam_imu = so3.normalize(self.q_cam_imu)
        self.p_imu_in_cam = np.asarray(self.p_imu_in_cam, dtype=float)
        self.R_ci = so3.to_rotation(self.q_cam_imu)

    @property
    def p_cam_in_imu(self):
        return -self.R_ci.T @ self.p_imu_in_cam

    @classmethod
    def from_camera_pose(cls, R_ic, p_cam_in_imu):
        """Build from the camera axes ``R_ic`` (camera -> IMU) and camera position in the IMU frame."""
        R_ci = np.asarray(R_ic).T
        return cls(so3.from_rotation(R_ci), -R_ci @ np.asarray(p_cam_in_imu, dtype=float))


@dataclass
class RelativePose:
    q: np.ndarray
    p: np.ndarray


@dataclass
class SlidingWindow:
    """Relative poses between consecutive reference frames, oldest first.

    ``frames`` holds the image index of every frame spanned by the window, so
    ``len(frames) == len(poses) + 1`` and ``frames[-1]`` is the current
    reference frame.
    """

    n_max: int = 20
    poses: list = field(default_factory=list)
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.poses)

    def copy(self):
        return SlidingWindow(self.n_max,
                             [RelativePose(p.q.copy(), p.p.copy()) for p in self.poses],
                             list(self.frames))

    def position_of(self, frame):
        """Index of ``frame`` within ``frames``; raises ``KeyError`` outside the window."""
        try:
            return self.frames.index(frame)
        except ValueError:
            raise KeyError(f"frame {frame} is not in the window") from None


@dataclass
class FilterState:
    q_global: np.ndarray
    p_global: np.ndarray
    gravity: np.ndarray
    q_rel: np.ndarray
    p_rel: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    window: SlidingWindow
    cov: np.ndarray
    epoch: int = 0
    clock: float = 0.0
    # preintegration bookkeeping for the running epoch (owned by propagation)
    preint: object = None

    @property
    def dim(self):
        return ROBO_DIM + POSE_DIM * len(self.window)

    def copy(self):
        return replace(
            self,
            q_global=self.q_global.copy(), p_global=self.p_global.copy(),
            gravity=self.gravity.copy(), q_rel=self.q_rel.copy(),
            p_rel=self.p_rel.copy(), v=self.v.copy(), bg=self.bg.copy(),
            ba=self.ba.copy(), window=self.window.copy(), cov=self.cov.copy(),
            preint=None if self.preint is None else self.preint.copy(),
        )

    def check(self, sym_tol=1e-10, psd_tol=-1e-9):
        """Raise ``AssertionError`` if the covariance invariants are violated."""
        P = self.cov
        assert P.shape == (self.dim, self.dim), "covariance dimension mismatch"
        scale = max(1.0, np.abs(P).max())
        assert np.abs(P - P.T).max() <= sym_tol * scale, "covariance not symmetric"
        assert np.linalg.eigvalsh(P).min() >= psd_tol, "covariance not PSD"


def symmetrize(P):
    return 0.5 * (P + P.T)


def inject_error(state, dx):
    """Return ``state ⊞ dx``: multiplicative on quaternions, additive elsewhere."""
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (state.dim,):
        raise ValueError(f"correction has shape {dx.shape}, expected ({state.dim},)")
    out = state.copy()
    out.q_global = so3.multiply(so3.small_angle_quat(dx[TH_G]), state.q_global)
    out.p_global = state.p_global + dx[P_G]
    out.gravity = state.gravity + dx[GRAV]
    out.q_rel = so3.multiply(so3.small_angle_quat(dx[TH_I]), state.q_rel)
    out.p_rel = state.p_rel + dx[P_I]
    out.v = state.v + dx[VEL]
    out.bg = state.bg + dx[BG]
    out.ba = state.ba + dx[BA]
    for n, pose in enumerate(out.window.poses):
        d = dx[pose_slice(n)]
        pose.q = so3.multiply(so3.small_angle_quat(d[:3]), pose.q)
        pose.p = pose.p + d[3:]
    return out


def new_state(n_max=20, gravity=(0.0, 0.0, DEFAULT_GRAVITY), v=None, bg=None, ba=None,
              cov=None, frame=0, clock=0.0):
    """State at the global frame: identity global and relative poses, empty window."""
    cov = np.zeros((ROBO_DIM, ROBO_DIM)) if cov is None else np.array(cov, dtype=float)
    zero = np.zeros(3)
    return FilterState(
        q_global=so3.identity(), p_global=zero.copy(),
        gravity=np.array(gravity, dtype=float),
        q_rel=so3.identity(), p_rel=zero.copy(),
        v=zero.copy() if v is None else np.array(v, dtype=float),
        bg=zero.copy() if bg is None else np.array(bg, dtype=float),
        ba=zero.copy() if ba is None else np.array(ba, dtype=float),
        window=SlidingWindow(n_max=n_max, frames=[frame]),
        cov=cov, clock=clock,
    )


def initialize(imu_samples, window_seconds, gravity_mag=DEFAULT_GRAVITY,
               noise=None, n_max=20, frame=0, clock=0.0):
    """Static initialization from IMU samples taken before the platform moves.

    ``imu_samples`` is a sequence of ``(gyro, accel)`` pairs.  Gravity is the
    mean accelerometer reading rescaled to ``gravity_mag``, the gyro bias is
    the mean gyro reading and the accelerometer bias is what remains of the
    mean accelerometer reading once gravity is removed.  Pose uncertainty is
    zero; gravity and bias variances grow with the initialization length.
    """
    noise = NoiseConfig() if noise is None else noise
    if len(imu_samples) == 0:
        raise ValueError("initialization needs at least one IMU sample")
    if not window_seconds > 0.0:
        raise ValueError("window_seconds must be positive")
    gyro = np.array([np.asarray(s[0], dtype=float) for s in imu_samples])
    accel = np.array([np.asarray(s[1], dtype=float) for s in imu_samples])
    a_mean = accel.mean(axis=0)
    a_norm = np.linalg.norm(a_mean)
    if a_norm < 0.5 * gravity_mag:
        raise ValueError(f"mean accelerometer norm {a_norm:.3f} is too small for a static start")
    gravity = a_mean * (gravity_mag / a_norm)

    cov = np.zeros((ROBO_DIM, ROBO_DIM))
    dT = window_seconds
    cov[GRAV, GRAV] = dT * noise.sigma_a ** 2 * np.eye(3)
    cov[BG, BG] = dT * noise.sigma_wg ** 2 * np.eye(3)
    cov[BA, BA] = dT * noise.sigma_wa ** 2 * np.eye(3)
    return new_state(n_max=n_max, gravity=gravity, bg=gyro.mean(axis=0),
                     ba=a_mean - gravity, cov=cov, frame=frame, clock=clock)


def global_pose(state):
    """World-frame pose of the reference frame R_k.

    Returns ``(q, p)`` where ``q`` is the JPL quaternion R_k -> G and ``p`` is
    the position of R_k in G.
    """
    C = so3.to_rotation(state.q_global)
    return so3.inverse(state.q_global), -C.T @ state.p_global


def global_pose_covariance(state):
    """Covariances of the orientation error δθ_G (expressed in R_k) and of the world position.

    The position of R_k in G is ``-C(q_G)^T p_G`` whose linearization is
    ``[C^T [p_G]x, -C^T]`` with respect to ``(δθ_G, p̃_G)``.
    """
    C = so3.to_rotation(state.q_global)
    J = np.hstack([C.T @ so3.skew(state.p_global), -C.T])
    block = state.cov[:6, :6]
    return state.cov[TH_G, TH_G].copy(), J @ block @ J.T


def marginalize_oldest(state):
    """Drop the oldest window pose together with its rows/columns of the covariance."""
    if len(state.window) == 0:
        raise ValueError("cannot marginalize from an empty window")
    out = state.copy()
    out.window.poses.pop(0)
    out.window.frames.pop(0)
    keep = np.r_[0:ROBO_DIM, ROBO_DIM + POSE_DIM:state.dim]
    out.cov = state.cov[np.ix_(keep, keep)]
    return out
