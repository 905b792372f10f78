"""Synthetic camera/IMU datasets with exact ground truth.

Trajectories are analytic (or cubic splines) so positions, velocities,
accelerations, attitude and body rates are all available in closed form.
Truth is reported in the frame G of the IMU at t = 0, which is also where the
filter starts.  The world frame W used internally has z pointing up and
gravity ``(0, 0, -9.81)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import so3
from .propagation import ImuSample
from .state import DEFAULT_GRAVITY, CameraImuExtrinsics
from .update import FeatureTrack

log = logging.getLogger(__name__)

KINDS = ("circle", "waypoints", "stationary", "planar", "no_rotation_decel")

# camera axes expressed in the IMU frame: optical axis along body -y, image x along body -x
OUTWARD_CAMERA = np.array([[-1.0, 0.0, 0.0],
                           [0.0, 0.0, -1.0],
                           [0.0, -1.0, 0.0]])


def default_extrinsics():
    return CameraImuExtrinsics.from_camera_pose(OUTWARD_CAMERA, np.array([0.05, 0.02, 0.03]))


@dataclass
class TrajectorySpec:
    kind: str = "circle"
    radius: float = 5.0
    speed: float = 1.0
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    # circle excitation: relative speed modulation, vertical and roll/pitch oscillation
    speed_variation: float = 0.3
    vertical_amplitude: float = 0.3
    wobble_amplitude: float = 0.05
    # stationary attitude (roll, pitch, yaw) in rad
    attitude: tuple = (0.1, -0.05, 0.3)
    # straight-line deceleration (m/s²); the speed must stay positive
    deceleration: float = 0.1
    # planar figure-eight half-extents (m)
    extent: tuple = (4.0, 2.0)
    # waypoints: rows of (t, x, y, z)
    waypoints: list = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not (self.imu_rate > 0 and self.cam_rate > 0):
            raise ValueError("rates must be positive")
        if self.imu_rate < self.cam_rate:
            raise ValueError("imu_rate must be at least cam_rate")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of cam_rate")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class CameraSpec:
    fov_deg: float = 45.0
    focal_px: float = 460.0
    width_px: int = 640
    height_px: int = 480
    min_depth: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov_deg must lie in (0, 180)")

    @property
    def principal_point(self):
        return np.array([self.width_px / 2.0, self.height_px / 2.0])


@dataclass
class SceneSpec:
    placement: str = "cylinder"
    cylinder_radius: float = 6.0
    cylinder_height: tuple = (-1.5, 1.5)
    feature_count: int = 6000
    box_min: tuple = (-10.0, -30.0, -5.0)
    box_max: tuple = (10.0, -10.0, 5.0)
    camera: CameraSpec = field(default_factory=CameraSpec)
    pixel_noise_sigma: float = 1.5
    extrinsics: CameraImuExtrinsics = field(default_factory=default_extrinsics)

    def __post_init__(self):
        if self.placement not in ("cylinder", "random_box"):
            raise ValueError(f"unknown feature placement {self.placement!r}")
        if self.feature_count < 1:
            raise ValueError("feature_count must be positive")


@dataclass
class Truth:
    """Ground truth at every IMU sample, expressed in G."""

    t: np.ndarray
    p: np.ndarray       # IMU position in G
    R: np.ndarray       # IMU attitude, body -> G
    v_body: np.ndarray  # IMU velocity expressed in the IMU frame
    a_body: np.ndarray  # kinematic acceleration in the IMU frame (no gravity)
    omega: np.ndarray   # body rate
    bg: np.ndarray
    ba: np.ndarray
    gravity_up: np.ndarray  # gravity reaction (up vector, 9.81 m/s²) in G

    def q_global(self, k):
        """JPL quaternion G -> IMU at sample k."""
        return so3.from_rotation(self.R[k].T)


@dataclass
class Frame:
    index: int
    t: float
    imu_index: int
    track_ids: np.ndarray
    z: np.ndarray       # normalized image coordinates
    pixels: np.ndarray
    landmark_ids: np.ndarray = None  # index into SimOutput.landmarks per observation


@dataclass
class SimOutput:
    traj: TrajectorySpec
    scene: SceneSpec
    seed: int
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    frames: list
    truth: Truth
    landmarks: np.ndarray  # world-frame positions, one per feature
    label: str = ""
    world_origin: tuple = None  # (R, p) of the first IMU pose in the world frame

    @property
    def landmarks_g(self):
        """Landmark positions in G (the frame of the first IMU pose, where truth lives)."""
        if self.world_origin is None:
            return self.landmarks.copy()
        R0, p0 = self.world_origin
        return (self.landmarks - p0) @ R0

    def imu_samples(self, start=0, stop=None):
        stop = len(self.t) if stop is None else stop
        return [ImuSample(self.t[k], self.gyro[k], self.accel[k]) for k in range(start, stop)]

    @property
    def extrinsics(self):
        return self.scene.extrinsics


# ---------------------------------------------------------------------------
# kinematics


def _euler_rotation(roll, pitch, yaw):
    """Body -> world rotation for Z-Y-X Euler angles (vectorized)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(np.shape(roll) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def _euler_body_rate(roll, pitch, droll, dpitch, dyaw):
    return np.stack([droll - dyaw * np.sin(pitch),
                     dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
                     -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll)], axis=-1)


def _heading(vel, acc):
    """Yaw following the horizontal velocity, and its rate."""
    vx, vy = vel[:, 0], vel[:, 1]
    ax, ay = acc[:, 0], acc[:, 1]
    yaw = np.arctan2(vy, vx)
    dyaw = (vx * ay - vy * ax) / (vx * vx + vy * vy)
    return yaw, dyaw


def kinematics(spec, t):
    """World-frame position, velocity, acceleration, Euler angles and their rates."""
    n = len(t)
    zeros = np.zeros(n)
    if spec.kind == "circle":
        Om = spec.speed / spec.radius
        w1, w2, w3, w4 = 0.5, 0.7, 0.9, 1.3
        # θ' = Ω (1 + s cos w1 t) so the speed varies around its average
        A = spec.speed_variation * Om / w1
        th = Om * t + A * np.sin(w1 * t)
        dth = Om + A * w1 * np.cos(w1 * t)
        ddth = -A * w1 * w1 * np.sin(w1 * t)
        r, h = spec.radius, spec.vertical_amplitude
        c, s = np.cos(th), np.sin(th)
        pos = np.stack([r * c, r * s, h * np.sin(w2 * t)], axis=1)
        vel = np.stack([-r * s * dth, r * c * dth, h * w2 * np.cos(w2 * t)], axis=1)
        acc = np.stack([-r * c * dth ** 2 - r * s * ddth,
                        -r * s * dth ** 2 + r * c * ddth,
                        -h * w2 * w2 * np.sin(w2 * t)], axis=1)
        b = spec.wobble_amplitude
        roll, droll = b * np.sin(w3 * t), b * w3 * np.cos(w3 * t)
        pitch, dpitch = b * np.sin(w4 * t), b * w4 * np.cos(w4 * t)
        yaw, dyaw = th + np.pi / 2, dth
    elif spec.kind == "stationary":
        pos = vel = acc = np.zeros((n, 3))
        roll, pitch, yaw = (np.full(n, a) for a in spec.attitude)
        droll = dpitch = dyaw = zeros
    elif spec.kind == "no_rotation_decel":
        v0 = spec.speed
        if v0 - spec.deceleration * spec.duration <= 0.0:
            raise ValueError("deceleration stops the platform before the end of the run")
        x = v0 * t - 0.5 * spec.deceleration * t * t
        pos = np.stack([x, zeros, zeros], axis=1)
        vel = np.stack([v0 - spec.deceleration * t, zeros, zeros], axis=1)
        acc = np.stack([np.full(n, -spec.deceleration), zeros, zeros], axis=1)
        roll, pitch, yaw = (np.full(n, a) for a in spec.attitude)
        droll = dpitch = dyaw = zeros
    elif spec.kind == "planar":
        ax_, ay_ = spec.extent
        # Lissajous figure-eight; w chosen so the mean speed is close to spec.speed
        w = spec.speed / (1.2 * max(ax_, ay_))
        pos = np.stack([ax_ * np.sin(w * t), ay_ * np.sin(2 * w * t), zeros], axis=1)
        vel = np.stack([ax_ * w * np.cos(w * t), 2 * ay_ * w * np.cos(2 * w * t), zeros], axis=1)
        acc = np.stack([-ax_ * w * w * np.sin(w * t), -4 * ay_ * w * w * np.sin(2 * w * t), zeros], axis=1)
        yaw, dyaw = _heading(vel, acc)
        roll = pitch = droll = dpitch = zeros
    else:  # waypoints
        wp = np.asarray(spec.waypoints if spec.waypoints is not None else _default_waypoints(spec), dtype=float)
        spline = CubicSpline(wp[:, 0], wp[:, 1:], axis=0, bc_type="natural")
        pos, vel, acc = spline(t), spline(t, 1), spline(t, 2)
        yaw, dyaw = _heading(vel, acc)
        roll = pitch = droll = dpitch = zeros
    return pos, vel, acc, (roll, pitch, yaw), (droll, dpitch, dyaw)


def _default_waypoints(spec):
    T = spec.duration
    r = spec.radius
    ang = np.linspace(0.0, 2 * np.pi, 9)
    times = np.linspace(0.0, T, 9)
    return np.column_stack([times, r * np.cos(ang) * (1 + 0.1 * np.sin(3 * ang)),
                            r * np.sin(ang), 0.2 * np.sin(2 * ang)])


# ---------------------------------------------------------------------------
# scene


def _landmarks(scene, traj, rng):
    n = scene.feature_count
    if scene.placement == "cylinder":
        if traj.kind == "circle" and scene.cylinder_radius <= traj.radius:
            raise ValueError("cylinder must enclose the circular path")
        ang = rng.uniform(0.0, 2 * np.pi, n)
        z = rng.uniform(*scene.cylinder_height, n)
        r = scene.cylinder_radius
        return np.column_stack([r * np.cos(ang), r * np.sin(ang), z])
    lo, hi = np.asarray(scene.box_min, float), np.asarray(scene.box_max, float)
    return rng.uniform(lo, hi, size=(n, 3))


def _project(scene, R_wb, p_wb, landmarks):
    """Normalized coordinates, pixels and visibility mask of all landmarks."""
    ex = scene.extrinsics
    cam = scene.camera
    R_wc = R_wb @ ex.R_ci.T
    p_wc = p_wb + R_wb @ ex.p_cam_in_imu
    x = (landmarks - p_wc) @ R_wc  # rows are R_wc^T (L - p_wc)
    depth = x[:, 2]
    ok = depth > cam.min_depth
    safe = np.where(ok, depth, 1.0)
    z = x[:, :2] / safe[:, None]
    half = np.deg2rad(cam.fov_deg) / 2.0
    ok &= np.hypot(z[:, 0], z[:, 1]) < np.tan(half)
    pix = z * cam.focal_px + cam.principal_point
    ok &= (pix[:, 0] >= 0) & (pix[:, 0] < cam.width_px) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height_px)
    return z, pix, ok


# ---------------------------------------------------------------------------
# generation


def generate(traj, scene, noise=None, seed=0, bias0=None, label=""):
    """Simulate one dataset.

    ``noise=None`` gives a noise-free dataset (exact IMU, constant biases,
    exact image coordinates).  ``bias0 = (bg0, ba0)`` sets the initial biases
    (zero by default).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    n = int(round(traj.duration * traj.imu_rate))
    t = np.arange(n + 1) / traj.imu_rate
    dt = 1.0 / traj.imu_rate
    pos, vel, acc, (roll, pitch, yaw), (droll, dpitch, dyaw) = kinematics(traj, t)
    R_wb = _euler_rotation(roll, pitch, yaw)
    omega = _euler_body_rate(roll, pitch, droll, dpitch, dyaw)
    g_w = np.array([0.0, 0.0, -DEFAULT_GRAVITY])

    landmarks = _landmarks(scene, traj, rng)

    bg0, ba0 = (np.zeros(3), np.zeros(3)) if bias0 is None else (np.asarray(b, float) for b in bias0)
    a_body = np.einsum("kji,kj->ki", R_wb, acc)  # R_wb^T acc
    f_body = np.einsum("kji,kj->ki", R_wb, acc - g_w)
    if noise is None:
        bg = np.tile(bg0, (n + 1, 1))
        ba = np.tile(ba0, (n + 1, 1))
        gyro = omega + bg
        accel = f_body + ba
    else:
        walk_g = rng.normal(size=(n + 1, 3)) * noise.sigma_wg * np.sqrt(dt)
        walk_a = rng.normal(size=(n + 1, 3)) * noise.sigma_wa * np.sqrt(dt)
        walk_g[0] = walk_a[0] = 0.0
        bg = bg0 + np.cumsum(walk_g, axis=0)
        ba = ba0 + np.cumsum(walk_a, axis=0)
        gyro = omega + bg + rng.normal(size=(n + 1, 3)) * noise.sigma_g / np.sqrt(dt)
        accel = f_body + ba + rng.normal(size=(n + 1, 3)) * noise.sigma_a / np.sqrt(dt)

    # images
    step = int(round(traj.imu_rate / traj.cam_rate))
    frames = []
    next_id = 0
    current = np.full(len(landmarks), -1)
    last_seen_frame = 0.0
    for fi, k in enumerate(range(0, n + 1, step)):
        z, pix, ok = _project(scene, R_wb[k], pos[k], landmarks)
        if noise is not None and scene.pixel_noise_sigma > 0:
            pix = pix + rng.normal(size=pix.shape) * scene.pixel_noise_sigma
            z = (pix - scene.camera.principal_point) / scene.camera.focal_px
        # features that reappear after leaving the view start a new track
        new = ok & (current < 0)
        current[new] = np.arange(next_id, next_id + new.sum())
        next_id += int(new.sum())
        current[~ok] = -1
        idx = np.flatnonzero(ok)
        if len(idx):
            last_seen_frame = t[k]
        elif t[k] - last_seen_frame > 1.0:
            raise ValueError(f"no feature visible for more than 1 s at t = {t[k]:.2f}")
        frames.append(Frame(fi, t[k], k, current[idx].copy(), z[idx], pix[idx], idx))

    # truth in the frame of the first IMU pose
    R0 = R_wb[0]
    R_g = np.einsum("ji,kjl->kil", R0, R_wb)
    truth = Truth(
        t=t,
        p=(pos - pos[0]) @ R0,
        R=R_g,
        v_body=np.einsum("kji,kj->ki", R_wb, vel),
        a_body=a_body,
        omega=omega,
        bg=bg,
        ba=ba,
        gravity_up=R0.T @ -g_w,
    )
    return SimOutput(traj, scene, seed, t, gyro, accel, frames, truth, landmarks,
                     label or traj.kind, (R0.copy(), pos[0].copy()))


def tracks_from_frames(frames):
    """Collect per-frame observations into complete :class:`FeatureTrack` objects."""
    tracks = {}
    for fr in frames:
        for tid, z in zip(fr.track_ids, fr.z):
            tracks.setdefault(int(tid), FeatureTrack(int(tid))).observations.append((fr.index, z))
    return tracks


def degenerate_suite(seed=0, noise=None, imu_rate=200.0):
    """Canned scenarios for the special-motion analysis, each labelled with its motion class."""
    from .observability import motion_classifier

    stationary = TrajectorySpec(kind="stationary", duration=30.0, imu_rate=imu_rate)
    far_box = SceneSpec(placement="random_box", feature_count=400,
                        box_min=(-10.0, -30.0, -6.0), box_max=(10.0, -10.0, 6.0))
    decel = TrajectorySpec(kind="no_rotation_decel", duration=10.0, speed=1.5,
                           deceleration=0.1, attitude=(0.0, 0.0, 0.0), imu_rate=imu_rate)
    wall = SceneSpec(placement="random_box", feature_count=1500,
                     box_min=(-2.0, -8.0, -2.0), box_max=(16.0, -4.0, 2.0))
    planar = TrajectorySpec(kind="planar", duration=30.0, imu_rate=imu_rate)
    circle = TrajectorySpec(kind="circle", duration=30.0, imu_rate=imu_rate)
    cylinder = SceneSpec(cylinder_radius=8.0)
    out = []
    for traj, scene in ((stationary, far_box), (decel, wall), (planar, cylinder), (circle, SceneSpec())):
        sim = generate(traj, scene, noise, seed)
        sim.label = motion_classifier(sim.truth)
        out.append(sim)
    return out
