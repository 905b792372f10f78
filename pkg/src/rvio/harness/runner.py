"""Per-image driver: propagate, update with completed tracks, augment, compose."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..composition import compose
from ..propagation import ImuSample, propagate
from ..state import NoiseConfig, CameraImuExtrinsics, global_pose, global_pose_covariance, initialize
from ..update import FeatureTrack, UpdateOptions, augment, update_with_tracks

log = logging.getLogger(__name__)

MAX_GAP = 0.5


@dataclass
class RunConfig:
    n_max: int = 20
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    update: UpdateOptions = field(default_factory=UpdateOptions)
    gravity_mag: float = 9.81
    extrinsics: CameraImuExtrinsics = field(default_factory=CameraImuExtrinsics)
    init_seconds: float = 1.0
    # most features tracked at once; new tracks are not started beyond it
    feature_budget: int = 200


@dataclass
class Dataset:
    """Time-ordered IMU stream plus per-image observations.

    ``frames`` is a list of ``(t, feature_ids, z)`` with ``z`` in normalized
    image coordinates.
    """

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    frames: list

    @classmethod
    def from_sim(cls, sim):
        return cls(sim.t, sim.gyro, sim.accel, [(f.t, f.track_ids, f.z) for f in sim.frames])


@dataclass
class RunResult:
    t: list = field(default_factory=list)
    q: list = field(default_factory=list)  # JPL G -> R_k
    p: list = field(default_factory=list)  # position of R_k in G
    cov_theta: list = field(default_factory=list)
    cov_pos: list = field(default_factory=list)
    cov_diag: list = field(default_factory=list)
    timing: dict = field(default_factory=lambda: {"propagate": 0.0, "update": 0.0, "compose": 0.0})
    accepted: int = 0
    rejected: int = 0
    # (t, feature_id, anchor frame, landmark) of every accepted track
    landmarks: list = field(default_factory=list)
    final_state: object = None

    def log_state(self, t, state):
        self.t.append(t)
        self.q.append(state.q_global.copy())
        self.p.append(global_pose(state)[1])
        P_th, P_p = global_pose_covariance(state)
        self.cov_theta.append(P_th)
        self.cov_pos.append(P_p)
        self.cov_diag.append(np.diag(state.cov)[:24].copy())


def imu_batch(data, t0, t1):
    """Samples spanning [t0, t1]; endpoints are linearly interpolated when missing."""
    t = data.t
    lo = np.searchsorted(t, t0, side="left")
    hi = np.searchsorted(t, t1, side="right")
    samples = [ImuSample(t[k], data.gyro[k], data.accel[k]) for k in range(lo, hi)]

    def interp(tq):
        k = int(np.clip(np.searchsorted(t, tq), 1, len(t) - 1))
        w = (tq - t[k - 1]) / (t[k] - t[k - 1])
        return ImuSample(tq, (1 - w) * data.gyro[k - 1] + w * data.gyro[k],
                         (1 - w) * data.accel[k - 1] + w * data.accel[k])

    if not samples or samples[0].t > t0:
        samples.insert(0, interp(t0))
    if samples[-1].t < t1:
        samples.append(interp(t1))
    gaps = np.diff([s.t for s in samples])
    if len(gaps) and gaps.max() > MAX_GAP:
        raise ValueError(f"IMU gap of {gaps.max():.3f} s between {t0:.3f} and {t1:.3f}")
    return samples


class TrackManager:
    """Active feature histories and the completion rule.

    A track completes when it is missing from the current image, or when its
    history covers the full window (``n_max + 1`` frames).  In that case the
    oldest half is used and the newer half stays active.
    """

    def __init__(self, n_max, budget=None):
        self.n_max = n_max
        self.budget = budget
        self.active = {}

    def completed(self, frame_ids):
        seen = set(int(i) for i in frame_ids)
        done = []
        for fid in list(self.active):
            obs = self.active[fid]
            if fid not in seen:
                done.append(FeatureTrack(fid, obs))
                del self.active[fid]
            elif len(obs) >= self.n_max + 1:
                half = (len(obs) + 1) // 2
                done.append(FeatureTrack(fid, obs[:half]))
                self.active[fid] = obs[half:]
        return done

    def add(self, frame, ids, zs):
        for fid, z in zip(ids, zs):
            fid = int(fid)
            if fid not in self.active:
                if self.budget is not None and len(self.active) >= self.budget:
                    continue
                self.active[fid] = []
            self.active[fid].append((frame, np.asarray(z, float)))

    def prune(self, window_frames):
        oldest = window_frames[0]
        for fid in list(self.active):
            obs = [o for o in self.active[fid] if o[0] >= oldest]
            if obs:
                self.active[fid] = obs
            else:
                del self.active[fid]


def run_filter(data, config, state=None):
    """Run the filter over a dataset and log the global pose at every image.

    Without an explicit initial ``state`` the filter is initialized from the
    IMU samples of the first ``config.init_seconds`` (platform assumed static)
    and starts at the first image at or after that time.
    """
    frames = data.frames
    if not frames:
        raise ValueError("dataset has no images")
    if state is None:
        t_init = data.t[0] + config.init_seconds
        k = np.searchsorted(data.t, t_init, side="right")
        samples = list(zip(data.gyro[:k], data.accel[:k]))
        state = initialize(samples, config.init_seconds, config.gravity_mag, config.noise, config.n_max)
        start = next(i for i, f in enumerate(frames) if f[0] >= t_init - 1e-12)
    else:
        start = 0
    state = state.copy()
    state.window.n_max = config.n_max
    state.window.frames = [start]
    state.clock = frames[start][0]

    tracks = TrackManager(config.n_max, config.feature_budget)
    result = RunResult()
    result.log_state(frames[start][0], state)
    tracks.add(start, frames[start][1], frames[start][2])
    for fi in range(start + 1, len(frames)):
        t_prev, t_now = frames[fi - 1][0], frames[fi][0]
        ids, zs = frames[fi][1], frames[fi][2]

        tic = time.perf_counter()
        state = propagate(state, imu_batch(data, t_prev, t_now), config.noise)
        result.timing["propagate"] += time.perf_counter() - tic

        tic = time.perf_counter()
        done = tracks.completed(ids)
        if done:
            state, stats = update_with_tracks(state, done, config.extrinsics, config.noise, config.update)
            result.accepted += stats.accepted
            result.rejected += stats.rejected
            result.landmarks.extend((t_now, *x) for x in stats.landmarks)
        state = augment(state, frame=fi)
        result.timing["update"] += time.perf_counter() - tic

        tic = time.perf_counter()
        state = compose(state)
        tracks.prune(state.window.frames)
        tracks.add(fi, ids, zs)
        result.timing["compose"] += time.perf_counter() - tic
        result.log_state(t_now, state)
    result.final_state = state
    return result
