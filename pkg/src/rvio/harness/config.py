"""Structured text configuration.

The file is INI-style: ``[section]`` headers followed by ``key = value``
lines.  Every setting is addressed by its dotted name ``section.key`` (for
example ``trajectory.radius``); sections may also be dotted
(``[scene.camera]`` holds ``scene.camera.fov_deg``).  Every key has a default
listed in :data:`SCHEMA`, and unknown keys are an error.
"""

import configparser
import logging
from dataclasses import dataclass

import numpy as np

from ..simulator import CameraSpec, SceneSpec, TrajectorySpec, OUTWARD_CAMERA
from ..state import CameraImuExtrinsics, NoiseConfig
from ..update import UpdateOptions
from .montecarlo import InitSigmas, MonteCarloConfig
from .runner import RunConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    doc: str


def _vec(text):
    vals = [float(x) for x in str(text).replace(",", " ").split()]
    if len(vals) != 3:
        raise ValueError(f"expected three numbers, got {text!r}")
    return tuple(vals)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    # trajectory
    "trajectory.kind": Key("circle", str, "circle | waypoints | stationary | planar | no_rotation_decel"),
    "trajectory.radius": Key(5.0, float, "circle radius (m)"),
    "trajectory.speed": Key(1.0, float, "mean speed (m/s)"),
    "trajectory.duration": Key(60.0, float, "length of the run (s)"),
    "trajectory.imu_rate": Key(200.0, float, "IMU rate (Hz)"),
    "trajectory.cam_rate": Key(10.0, float, "camera rate (Hz); must divide the IMU rate"),
    "trajectory.speed_variation": Key(0.3, float, "circle: relative modulation of the angular speed"),
    "trajectory.vertical_amplitude": Key(0.3, float, "circle: vertical oscillation amplitude (m)"),
    "trajectory.wobble_amplitude": Key(0.05, float, "circle: roll/pitch oscillation amplitude (rad)"),
    "trajectory.deceleration": Key(0.1, float, "no_rotation_decel: deceleration (m/s^2)"),
    "trajectory.attitude": Key((0.1, -0.05, 0.3), _vec, "stationary / decel: roll, pitch, yaw (rad)"),
    "trajectory.extent": Key((4.0, 2.0, 0.0), _vec, "planar: figure-eight half extents x, y (m); third value unused"),
    # scene
    "scene.placement": Key("cylinder", str, "cylinder | random_box"),
    "scene.cylinder_radius": Key(6.0, float, "radius of the feature cylinder (m)"),
    "scene.cylinder_height": Key((-1.5, 1.5, 0.0), _vec, "cylinder z range: min, max (third value unused)"),
    "scene.feature_count": Key(6000, int, "number of landmarks"),
    "scene.box_min": Key((-10.0, -30.0, -5.0), _vec, "random_box lower corner (m)"),
    "scene.box_max": Key((10.0, -10.0, 5.0), _vec, "random_box upper corner (m)"),
    "scene.pixel_noise_sigma": Key(1.5, float, "image noise (px); also sets the filter's normalized sigma"),
    "scene.camera.fov_deg": Key(45.0, float, "field of view (deg)"),
    "scene.camera.focal_px": Key(460.0, float, "focal length (px)"),
    "scene.camera.width_px": Key(640, int, "image width (px)"),
    "scene.camera.height_px": Key(480, int, "image height (px)"),
    # extrinsics
    "extrinsics.camera_axes": Key("outward", str, "outward (optical axis along body -y) | identity"),
    "extrinsics.lever_arm": Key((0.05, 0.02, 0.03), _vec, "camera position in the IMU frame (m)"),
    # noise (continuous-time densities)
    "noise.sigma_g": Key(1.122e-4, float, "gyro white noise (rad/s/sqrt(Hz))"),
    "noise.sigma_wg": Key(5.6323e-6, float, "gyro bias random walk (rad/s^2/sqrt(Hz))"),
    "noise.sigma_a": Key(5.0119e-4, float, "accelerometer white noise (m/s^2/sqrt(Hz))"),
    "noise.sigma_wa": Key(3.9811e-5, float, "accelerometer bias random walk (m/s^3/sqrt(Hz))"),
    "noise.enabled": Key(True, _bool, "simulate sensor noise (false gives an exact dataset)"),
    # filter
    "filter.n_max": Key(20, int, "sliding-window size"),
    "filter.gravity_mag": Key(9.81, float, "gravity magnitude (m/s^2)"),
    "filter.init_seconds": Key(1.0, float, "static initialization length (s) when no initial state is given"),
    "filter.feature_budget": Key(200, int, "most features tracked at once"),
    # update
    "update.eps_pp": Key(1e-3, float, "views closer than this to the principal point are dropped"),
    "update.eps_par": Key(0.01, float, "parallax threshold (m) for refining the inverse depth"),
    "update.alpha": Key(0.05, float, "Mahalanobis gate significance"),
    "update.step_tol": Key(1e-8, float, "Gauss-Newton step tolerance"),
    "update.max_iters": Key(10, int, "Gauss-Newton iteration limit"),
    "update.min_track_length": Key(3, int, "shortest track used for an update"),
    # initial estimate (Monte Carlo)
    "init.velocity": Key(0.02, float, "initial velocity sigma (m/s)"),
    "init.gravity": Key(0.01, float, "initial gravity sigma (m/s^2)"),
    "init.gyro_bias": Key(5e-4, float, "initial gyro bias sigma (rad/s)"),
    "init.accel_bias": Key(5e-3, float, "initial accelerometer bias sigma (m/s^2)"),
    # batch
    "montecarlo.trials": Key(50, int, "number of trials"),
    "montecarlo.seed": Key(0, int, "master seed; trial i uses seed + i"),
    "montecarlo.workers": Key(1, int, "worker processes"),
    "montecarlo.nees_skip": Key(10.0, float, "NEES averages start this many seconds into the run"),
    "rng.algorithm": Key("philox", str, "random generator (only philox, a counter-based generator, is supported)"),
    # evaluation
    "eval.align": Key("none", str, "none | yaw_position | se3"),
}


class ConfigError(ValueError):
    pass


def defaults():
    return {k: v.default for k, v in SCHEMA.items()}


def _coerce(key, value):
    spec = SCHEMA[key]
    try:
        return spec.kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse(text, base=None):
    """Parse configuration text into a flat ``{dotted key: value}`` dict."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = defaults() if base is None else dict(base)
    for section in cp.sections():
        for name, raw in cp.items(section):
            key = f"{section}.{name}"
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _coerce(key, raw)
    _validate(cfg)
    return cfg


def load(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        with open(path) as fh:
            cfg = parse(fh.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        cfg[key] = _coerce(key, value)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["rng.algorithm"] != "philox":
        raise ConfigError("rng.algorithm must be 'philox'")
    if cfg["extrinsics.camera_axes"] not in ("outward", "identity"):
        raise ConfigError("extrinsics.camera_axes must be 'outward' or 'identity'")
    if cfg["montecarlo.trials"] < 1:
        raise ConfigError("montecarlo.trials must be at least 1")


def dump(cfg=None):
    """Render a configuration (defaults when ``cfg`` is None) with each key documented."""
    cfg = defaults() if cfg is None else cfg
    out = []
    current = None
    for key, spec in SCHEMA.items():
        section, name = key.rsplit(".", 1)
        if section != current:
            out.append(f"\n[{section}]")
            current = section
        val = cfg[key]
        if isinstance(val, tuple):
            val = ", ".join(repr(float(x)) for x in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        out.append(f"# {spec.doc}")
        out.append(f"{name} = {val}")
    return "\n".join(out).lstrip() + "\n"


# ---------------------------------------------------------------------------
# typed views


def trajectory_spec(cfg):
    x, y, _ = cfg["trajectory.extent"]
    return TrajectorySpec(
        kind=cfg["trajectory.kind"], radius=cfg["trajectory.radius"], speed=cfg["trajectory.speed"],
        duration=cfg["trajectory.duration"], imu_rate=cfg["trajectory.imu_rate"],
        cam_rate=cfg["trajectory.cam_rate"], speed_variation=cfg["trajectory.speed_variation"],
        vertical_amplitude=cfg["trajectory.vertical_amplitude"],
        wobble_amplitude=cfg["trajectory.wobble_amplitude"], attitude=cfg["trajectory.attitude"],
        deceleration=cfg["trajectory.deceleration"], extent=(x, y))


def camera_spec(cfg):
    return CameraSpec(fov_deg=cfg["scene.camera.fov_deg"], focal_px=cfg["scene.camera.focal_px"],
                      width_px=cfg["scene.camera.width_px"], height_px=cfg["scene.camera.height_px"])


def extrinsics(cfg):
    R_ic = OUTWARD_CAMERA if cfg["extrinsics.camera_axes"] == "outward" else np.eye(3)
    return CameraImuExtrinsics.from_camera_pose(R_ic, np.array(cfg["extrinsics.lever_arm"]))


def scene_spec(cfg):
    lo, hi, _ = cfg["scene.cylinder_height"]
    return SceneSpec(
        placement=cfg["scene.placement"], cylinder_radius=cfg["scene.cylinder_radius"],
        cylinder_height=(lo, hi), feature_count=cfg["scene.feature_count"],
        box_min=cfg["scene.box_min"], box_max=cfg["scene.box_max"], camera=camera_spec(cfg),
        pixel_noise_sigma=cfg["scene.pixel_noise_sigma"], extrinsics=extrinsics(cfg))


def noise_config(cfg):
    return NoiseConfig(sigma_g=cfg["noise.sigma_g"], sigma_wg=cfg["noise.sigma_wg"],
                       sigma_a=cfg["noise.sigma_a"], sigma_wa=cfg["noise.sigma_wa"],
                       sigma_im=cfg["scene.pixel_noise_sigma"] / cfg["scene.camera.focal_px"])


def sim_noise(cfg):
    """Noise used to simulate data (None for an exact dataset)."""
    return noise_config(cfg) if cfg["noise.enabled"] else None


def update_options(cfg):
    return UpdateOptions(eps_pp=cfg["update.eps_pp"], eps_par=cfg["update.eps_par"], alpha=cfg["update.alpha"],
                         step_tol=cfg["update.step_tol"], max_iters=cfg["update.max_iters"],
                         min_track_length=cfg["update.min_track_length"])


def run_config(cfg):
    return RunConfig(n_max=cfg["filter.n_max"], noise=noise_config(cfg), update=update_options(cfg),
                     gravity_mag=cfg["filter.gravity_mag"], extrinsics=extrinsics(cfg),
                     init_seconds=cfg["filter.init_seconds"], feature_budget=cfg["filter.feature_budget"])


def init_sigmas(cfg):
    return InitSigmas(velocity=cfg["init.velocity"], gravity=cfg["init.gravity"],
                      gyro_bias=cfg["init.gyro_bias"], accel_bias=cfg["init.accel_bias"])


def montecarlo_config(cfg):
    return MonteCarloConfig(trajectory=trajectory_spec(cfg), scene=scene_spec(cfg), noise=noise_config(cfg),
                            run=run_config(cfg), init=init_sigmas(cfg), trials=cfg["montecarlo.trials"],
                            seed=cfg["montecarlo.seed"], workers=cfg["montecarlo.workers"],
                            nees_skip=cfg["montecarlo.nees_skip"], simulate_noise=cfg["noise.enabled"])
