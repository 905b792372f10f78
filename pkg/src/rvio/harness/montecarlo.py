"""Monte Carlo trials: simulate, filter, evaluate, aggregate.

Each trial ``i`` uses seed ``seed + i`` for the simulated dataset and for the
initial-state perturbation, so a batch is reproducible trial by trial.
"""

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..simulator import SceneSpec, TrajectorySpec, generate
from ..state import BA, BG, GRAV, VEL, NoiseConfig, new_state
from .evaluation import Trajectory, evaluate, finite_mean
from .runner import Dataset, RunConfig, run_filter

log = logging.getLogger(__name__)


@dataclass
class InitSigmas:
    """Standard deviations of the initial estimate around the truth (and of the truth biases)."""

    velocity: float = 0.02
    gravity: float = 0.01
    gyro_bias: float = 5e-4
    accel_bias: float = 5e-3


@dataclass
class MonteCarloConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    run: RunConfig = field(default_factory=RunConfig)
    init: InitSigmas = field(default_factory=InitSigmas)
    trials: int = 50
    seed: int = 0
    workers: int = 1
    nees_skip: float = 10.0
    # False simulates exact sensors (the filter still uses `noise`)
    simulate_noise: bool = True


@dataclass
class TrialResult:
    seed: int
    eval: object
    timing: dict
    accepted: int
    rejected: int
    wall: float


class TrialError(RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"trial with seed {seed} failed: {cause!r}")
        self.seed = seed


def initial_covariance(init):
    P = np.zeros((24, 24))
    P[GRAV, GRAV] = init.gravity ** 2 * np.eye(3)
    P[VEL, VEL] = init.velocity ** 2 * np.eye(3)
    P[BG, BG] = init.gyro_bias ** 2 * np.eye(3)
    P[BA, BA] = init.accel_bias ** 2 * np.eye(3)
    return P


def draw_biases(init, seed):
    """Truth biases for trial ``seed``; the filter starts from zero bias estimates."""
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, 1]))
    return rng.normal(size=3) * init.gyro_bias, rng.normal(size=3) * init.accel_bias


def initial_state(sim, config, seed):
    """Truth at t = 0 perturbed by a draw from P0 (poses start exact, as in the filter)."""
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, 2]))
    tr = sim.truth
    init = config.init
    s = new_state(
        n_max=config.run.n_max,
        gravity=tr.gravity_up + rng.normal(size=3) * init.gravity,
        v=tr.v_body[0] + rng.normal(size=3) * init.velocity,
        bg=np.zeros(3),
        ba=np.zeros(3),
        cov=initial_covariance(init),
    )
    return s


def run_trial(config, index):
    seed = config.seed + index
    tic = time.perf_counter()
    try:
        bias0 = draw_biases(config.init, seed)
        noise = config.noise if config.simulate_noise else None
        sim = generate(config.trajectory, config.scene, noise, seed, bias0=bias0)
        run_cfg = RunConfig(**{**config.run.__dict__, "extrinsics": sim.extrinsics, "noise": config.noise})
        res = run_filter(Dataset.from_sim(sim), run_cfg, initial_state(sim, config, seed))
        ev = evaluate(Trajectory.from_run(res), Trajectory.from_truth(sim.truth))
    except Exception as exc:  # report the seed so the trial can be replayed
        raise TrialError(seed, exc) from exc
    wall = time.perf_counter() - tic
    log.info("trial %d (seed %d): %.2f deg / %.3f m in %.1f s", index, seed,
             ev.rmse_orientation_deg, ev.rmse_position, wall)
    return TrialResult(seed, ev, res.timing, res.accepted, res.rejected, wall)


def _run_one(args):
    return run_trial(*args)


@dataclass
class MonteCarloResult:
    t: np.ndarray
    rmse_orientation_deg: np.ndarray  # per epoch, over trials
    rmse_position: np.ndarray
    nees_orientation: np.ndarray      # per epoch, mean over trials
    nees_position: np.ndarray
    trials: list
    nees_skip: float

    def summary(self):
        keep = self.t >= self.t[0] + self.nees_skip
        return {
            "trials": len(self.trials),
            "rmse_orientation_deg": float(np.mean(self.rmse_orientation_deg)),
            "rmse_position_m": float(np.mean(self.rmse_position)),
            "nees_orientation": finite_mean(self.nees_orientation[keep]),
            "nees_position": finite_mean(self.nees_position[keep]),
            "wall_per_trial_s": float(np.mean([tr.wall for tr in self.trials])),
        }


def aggregate(trials, nees_skip=10.0):
    n = min(len(tr.eval.t) for tr in trials)
    ori = np.array([tr.eval.orientation_error_deg[:n] for tr in trials])
    pos = np.array([tr.eval.position_error[:n] for tr in trials])
    return MonteCarloResult(
        t=trials[0].eval.t[:n],
        rmse_orientation_deg=np.sqrt(np.mean(ori ** 2, axis=0)),
        rmse_position=np.sqrt(np.mean(pos ** 2, axis=0)),
        nees_orientation=np.mean([tr.eval.nees_orientation[:n] for tr in trials], axis=0),
        nees_position=np.mean([tr.eval.nees_position[:n] for tr in trials], axis=0),
        trials=list(trials),
        nees_skip=nees_skip,
    )


def monte_carlo(config):
    """Run ``config.trials`` trials (in worker processes when ``workers > 1``)."""
    if config.trials < 1:
        raise ValueError("trials must be at least 1")
    jobs = [(config, i) for i in range(config.trials)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            trials = list(pool.map(_run_one, jobs))
    else:
        trials = [_run_one(j) for j in jobs]
    return aggregate(trials, config.nees_skip)


def _fmt(x):
    return repr(float(x))


def write_curves(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rmse_orientation_deg", "rmse_position_m", "nees_orientation", "nees_position"])
        for row in zip(result.t, result.rmse_orientation_deg, result.rmse_position,
                       result.nees_orientation, result.nees_position):
            w.writerow([_fmt(v) for v in row])


def write_summary(result, path):
    """Table row plus one row per trial; timing columns are left out so the file is reproducible."""
    s = result.summary()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_seed", "rmse_orientation_deg", "rmse_position_m", "nees_orientation", "nees_position",
                    "accepted", "rejected"])
        for tr in result.trials:
            n_o, n_p = tr.eval.average_nees(result.nees_skip)
            w.writerow([tr.seed, _fmt(tr.eval.rmse_orientation_deg), _fmt(tr.eval.rmse_position),
                        _fmt(n_o), _fmt(n_p), tr.accepted, tr.rejected])
        w.writerow(["all", _fmt(s["rmse_orientation_deg"]), _fmt(s["rmse_position_m"]),
                    _fmt(s["nees_orientation"]), _fmt(s["nees_position"]),
                    sum(tr.accepted for tr in result.trials), sum(tr.rejected for tr in result.trials)])
