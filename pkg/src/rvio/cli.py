"""Command-line entry point: ``rvio <command> ...``.

Commands
--------
simulate       write a simulated dataset directory
run            run the filter on a dataset directory
eval           compare a TUM trajectory with ground truth
montecarlo     batch of simulated trials with aggregated metrics
observability  observability report for a simulated trajectory
config         print the documented default configuration
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from .harness import config as cfgmod
from .harness import io
from .harness.evaluation import ALIGNMENTS, Trajectory, evaluate
from .harness.montecarlo import draw_biases, initial_state, monte_carlo, write_curves, write_summary
from .harness.runner import run_filter

log = logging.getLogger("rvio")


def _add_config_args(p):
    p.add_argument("-c", "--config", help="configuration file (INI with dotted keys)")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def _load(args):
    return cfgmod.load(args.config, args.set)


def cmd_simulate(args):
    from .simulator import generate

    cfg = _load(args)
    seed = cfg["montecarlo.seed"] if args.seed is None else args.seed
    mc = cfgmod.montecarlo_config(cfg)
    bias0 = draw_biases(mc.init, seed)
    sim = generate(mc.trajectory, mc.scene, cfgmod.sim_noise(cfg), seed, bias0=bias0)
    s0 = initial_state(sim, mc, seed)
    init = (s0.gravity, s0.v, s0.bg, s0.ba,
            (mc.init.gravity, mc.init.velocity, mc.init.gyro_bias, mc.init.accel_bias))
    io.write_dataset(args.out, sim, init)
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(cfgmod.dump(cfg))
    print(f"wrote {len(sim.t)} IMU samples and {len(sim.frames)} images to {args.out}")
    return 0


def cmd_run(args):
    cfg_path = args.config
    if cfg_path is None and os.path.exists(os.path.join(args.dataset, "config.ini")):
        cfg_path = os.path.join(args.dataset, "config.ini")
    cfg = cfgmod.load(cfg_path, args.set)
    run_cfg = cfgmod.run_config(cfg)
    data = io.read_dataset(args.dataset, cfgmod.camera_spec(cfg), cfg["trajectory.cam_rate"])
    init_path = os.path.join(args.dataset, io.INIT_FILE)
    state = io.read_init(init_path, run_cfg.n_max) if os.path.exists(init_path) and not args.static_init else None
    tic = time.perf_counter()
    res = run_filter(data, run_cfg, state)
    wall = time.perf_counter() - tic
    os.makedirs(args.out, exist_ok=True)
    io.write_tum(os.path.join(args.out, "trajectory.tum"), Trajectory.from_run(res))
    io.write_covariance_log(os.path.join(args.out, "covariance.csv"), res)
    n = max(len(res.t) - 1, 1)
    timing = {k: 1e3 * v / n for k, v in res.timing.items()}
    with open(os.path.join(args.out, "timing.json"), "w") as fh:
        json.dump({"ms_per_image": timing, "wall_s": wall, "accepted": res.accepted,
                   "rejected": res.rejected}, fh, indent=2)
    print(f"{len(res.t)} poses in {wall:.1f} s; per image: "
          + ", ".join(f"{k} {v:.2f} ms" for k, v in timing.items()))
    return 0


def cmd_eval(args):
    est = io.read_tum(args.estimate)
    truth = io.read_tum(args.truth)
    if args.covariance:
        t, _, p_th, p_pos = io.read_covariance_log(args.covariance)
        if len(t) != len(est.t) or np.any(np.abs(t - est.t) > 1e-6):
            raise ValueError("covariance log does not match the estimate timestamps")
        est = Trajectory(est.t, est.q, est.p, p_th, p_pos)
    ev = evaluate(est, truth, args.align)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "orientation_error_deg", "position_error_m", "nees_orientation", "nees_position"])
            for row in zip(ev.t, ev.orientation_error_deg, ev.position_error, ev.nees_orientation, ev.nees_position):
                w.writerow([repr(float(x)) for x in row])
    summary = ev.summary(args.nees_skip)
    for k, v in summary.items():
        print(f"{k:>22s}  {v:.6g}")
    return 0


def cmd_montecarlo(args):
    cfg = _load(args)
    mc = cfgmod.montecarlo_config(cfg)
    if args.trials is not None:
        mc.trials = args.trials
    if args.workers is not None:
        mc.workers = args.workers
    tic = time.perf_counter()
    res = monte_carlo(mc)
    wall = time.perf_counter() - tic
    os.makedirs(args.out, exist_ok=True)
    write_curves(res, os.path.join(args.out, "curves.csv"))
    write_summary(res, os.path.join(args.out, "summary.csv"))
    s = res.summary()
    print(f"{s['trials']} trials in {wall:.1f} s")
    for k in ("rmse_orientation_deg", "rmse_position_m", "nees_orientation", "nees_position"):
        print(f"{k:>22s}  {s[k]:.4f}")
    return 0


def cmd_observability(args):
    from . import observability as ob
    from .simulator import generate

    cfg = _load(args)
    traj = cfgmod.trajectory_spec(cfg)
    sim = generate(traj, cfgmod.scene_spec(cfg), None, cfg["montecarlo.seed"])
    k0 = int(round(args.start * traj.imu_rate))
    k1 = k0 + int(round(args.span * traj.imu_rate)) + 1
    if k1 > len(sim.t):
        raise ValueError("analysis interval extends past the end of the trajectory")
    hist = ob.history_from_truth(sim.truth, k0, k1)
    landmarks = ob.default_landmarks(hist, args.landmarks)
    rep = ob.build_observability_matrix(hist, landmarks, args.steps, args.composition,
                                        motion_label=ob.motion_classifier(sim.truth),
                                        pin_reference_orientation=args.pin)
    out = dict(rep.summary())
    out["singular_values"] = [float(x) for x in rep.singular_values]
    if args.format == "json":
        text = json.dumps(out, indent=2)
    else:
        lines = ["quantity,value"]
        lines += [f"{k},{v}" for k, v in out.items() if k != "singular_values"]
        lines += [f"sigma_{i},{repr(v)}" for i, v in enumerate(out["singular_values"])]
        text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_config(args):
    sys.stdout.write(cfgmod.dump())
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="rvio", description="Robocentric visual-inertial odometry tools.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset directory")
    _add_config_args(p)
    p.add_argument("--seed", type=int, help="dataset seed (default montecarlo.seed)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the filter on a dataset directory")
    _add_config_args(p)
    p.add_argument("dataset", help="directory with imu.csv and tracks.csv")
    p.add_argument("--static-init", action="store_true",
                   help="ignore init.csv and initialize from the first filter.init_seconds of IMU data")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compare an estimate with ground truth")
    p.add_argument("estimate", help="TUM trajectory")
    p.add_argument("truth", help="TUM trajectory")
    p.add_argument("--covariance", help="covariance log written by `run` (enables NEES)")
    p.add_argument("--align", choices=ALIGNMENTS, default="none")
    p.add_argument("--nees-skip", type=float, default=0.0, help="seconds excluded from the NEES averages")
    p.add_argument("-o", "--out", help="per-epoch metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("montecarlo", help="simulated trials with aggregated metrics")
    _add_config_args(p)
    p.add_argument("-n", "--trials", type=int)
    p.add_argument("-j", "--workers", type=int)
    p.add_argument("-o", "--out", required=True, help="output directory for curves.csv and summary.csv")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("observability", help="observability report for a simulated trajectory")
    _add_config_args(p)
    p.add_argument("--start", type=float, default=0.0, help="start of the analysis interval (s)")
    p.add_argument("--span", type=float, default=10.0, help="length of the analysis interval (s)")
    p.add_argument("--steps", type=int, default=10, help="number of measurement times after the start")
    p.add_argument("--landmarks", type=int, default=1)
    p.add_argument("--composition", action="store_true", help="use the composed (linear) landmark rows")
    p.add_argument("--pin", action="store_true", help="treat the reference orientation as known")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("config", help="print the default configuration")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
