"""Dataset and result files.

* IMU CSV ``t_ns,wx,wy,wz,ax,ay,az`` (SI units, one row per sample).
* Track CSV ``frame,t_ns,feature_id,u,v`` with ``u, v`` in pixels.
* Trajectories in TUM format ``t tx ty tz qx qy qz qw``.  The quaternion is
  the JPL quaternion G -> body, whose components coincide with the
  Hamilton quaternion body -> G that TUM tools expect.
* Covariance log: per epoch the 24 robocentric variances followed by the
  orientation and position 3x3 marginals (row-major).
* Optional initial state ``init.csv``: gravity, velocity and biases in the
  first IMU frame together with their standard deviations.
"""

import csv
import logging
import os

import numpy as np

from ..state import BA, BG, GRAV, VEL, new_state
from .evaluation import Trajectory
from .runner import Dataset

log = logging.getLogger(__name__)

IMU_HEADER = ["t_ns", "wx", "wy", "wz", "ax", "ay", "az"]
TRACK_HEADER = ["frame", "t_ns", "feature_id", "u", "v"]
INIT_HEADER = ["gx", "gy", "gz", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
               "sigma_g", "sigma_v", "sigma_bg", "sigma_ba"]

IMU_FILE = "imu.csv"
TRACK_FILE = "tracks.csv"
TRUTH_FILE = "truth.tum"
INIT_FILE = "init.csv"


class FormatError(ValueError):
    pass


def _ns(t):
    return int(round(float(t) * 1e9))


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if [h.strip() for h in head] != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(head)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


# ---------------------------------------------------------------------------
# IMU


def write_imu(path, t, gyro, accel):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for ti, g, a in zip(t, gyro, accel):
            w.writerow([_ns(ti), *(repr(float(x)) for x in g), *(repr(float(x)) for x in a)])


def read_imu(path):
    t, data = [], []
    for lineno, row in _rows(path, IMU_HEADER):
        try:
            t.append(int(row[0]) * 1e-9)
            data.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not t:
        raise FormatError(f"{path}: no samples")
    t = np.array(t)
    if np.any(np.diff(t) <= 0):
        raise FormatError(f"{path}: timestamps are not strictly increasing")
    data = np.array(data)
    return t, data[:, :3], data[:, 3:]


# ---------------------------------------------------------------------------
# tracks


def write_tracks(path, frames):
    """``frames``: objects with ``index``, ``t``, ``track_ids`` and ``pixels``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for fr in frames:
            for fid, (u, v) in zip(fr.track_ids, fr.pixels):
                w.writerow([fr.index, _ns(fr.t), int(fid), repr(float(u)), repr(float(v))])


def read_tracks(path, camera, frame_times=None):
    """Per-image observations ``[(t, ids, z)]`` with ``z`` normalized by ``camera``.

    ``frame_times`` lists every image time so that images without features
    are kept; otherwise frames are taken from the file.
    """
    by_frame = {}
    for lineno, row in _rows(path, TRACK_HEADER):
        try:
            f, t_ns, fid = int(row[0]), int(row[1]), int(row[2])
            u, v = float(row[3]), float(row[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        entry = by_frame.setdefault(f, [t_ns, [], []])
        if entry[0] != t_ns:
            raise FormatError(f"{path}:{lineno}: frame {f} has two timestamps")
        entry[1].append(fid)
        entry[2].append((u, v))
    pp = np.array([camera.width_px / 2.0, camera.height_px / 2.0])
    if frame_times is not None:
        n = len(frame_times)
        if by_frame and max(by_frame) >= n:
            raise FormatError(f"{path}: frame index {max(by_frame)} beyond the {n} image times")
        out = []
        for f in range(n):
            t_ns, ids, pix = by_frame.get(f, [_ns(frame_times[f]), [], []])
            z = (np.array(pix, float).reshape(-1, 2) - pp) / camera.focal_px
            out.append((t_ns * 1e-9, np.array(ids, dtype=int), z))
        return out
    out = []
    last = -np.inf
    for f in sorted(by_frame):
        t_ns, ids, pix = by_frame[f]
        if t_ns * 1e-9 <= last:
            raise FormatError(f"{path}: frame {f} is not later than the previous frame")
        last = t_ns * 1e-9
        out.append((t_ns * 1e-9, np.array(ids, dtype=int), (np.array(pix, float) - pp) / camera.focal_px))
    return out


# ---------------------------------------------------------------------------
# trajectories


def write_tum(path, traj):
    with open(path, "w") as fh:
        fh.write("# t tx ty tz qx qy qz qw\n")
        for t, p, q in zip(traj.t, traj.p, traj.q):
            fh.write(" ".join(repr(float(x)) for x in (t, *p, *q)) + "\n")


def read_tum(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no poses")
    a = np.array(rows)
    return Trajectory(a[:, 0], a[:, 4:8], a[:, 1:4])


# ---------------------------------------------------------------------------
# covariance log


def covariance_header():
    return (["t"] + [f"P{i}" for i in range(24)] + [f"Ptheta{i}{j}" for i in range(3) for j in range(3)]
            + [f"Ppos{i}{j}" for i in range(3) for j in range(3)])


def write_covariance_log(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(covariance_header())
        for t, d, pt, pp in zip(result.t, result.cov_diag, result.cov_theta, result.cov_pos):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in np.concatenate([d, np.ravel(pt), np.ravel(pp)])])


def read_covariance_log(path):
    """Times, 24 variances, orientation and position marginals."""
    header = covariance_header()
    vals = [[float(x) for x in row] for _, row in _rows(path, header)]
    a = np.array(vals).reshape(-1, len(header))
    return a[:, 0], a[:, 1:25], a[:, 25:34].reshape(-1, 3, 3), a[:, 34:43].reshape(-1, 3, 3)


# ---------------------------------------------------------------------------
# initial state


def write_init(path, gravity, v, bg, ba, sigmas):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INIT_HEADER)
        w.writerow([repr(float(x)) for x in (*gravity, *v, *bg, *ba, *sigmas)])


def read_init(path, n_max=20):
    rows = [r for _, r in _rows(path, INIT_HEADER)]
    if len(rows) != 1:
        raise FormatError(f"{path}: expected exactly one row")
    x = np.array([float(c) for c in rows[0]])
    cov = np.zeros((24, 24))
    for sl, s in zip((GRAV, VEL, BG, BA), x[12:16]):
        cov[sl, sl] = s * s * np.eye(3)
    return new_state(n_max=n_max, gravity=x[0:3], v=x[3:6], bg=x[6:9], ba=x[9:12], cov=cov)


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(directory, sim, init=None):
    """Write a simulated dataset: IMU, tracks (pixels), truth and, optionally, an initial state."""
    os.makedirs(directory, exist_ok=True)
    write_imu(os.path.join(directory, IMU_FILE), sim.t, sim.gyro, sim.accel)
    write_tracks(os.path.join(directory, TRACK_FILE), sim.frames)
    write_tum(os.path.join(directory, TRUTH_FILE), Trajectory.from_truth(sim.truth))
    if init is not None:
        write_init(os.path.join(directory, INIT_FILE), *init)


def read_dataset(directory, camera, cam_rate=None):
    """Load ``imu.csv`` and ``tracks.csv``; ``cam_rate`` fills in images without features."""
    t, gyro, accel = read_imu(os.path.join(directory, IMU_FILE))
    times = None
    if cam_rate is not None:
        n = int(np.floor((t[-1] - t[0]) * cam_rate + 1e-9)) + 1
        times = t[0] + np.arange(n) / cam_rate
    frames = read_tracks(os.path.join(directory, TRACK_FILE), camera, times)
    return Dataset(t, gyro, accel, frames)
