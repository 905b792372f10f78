"""A short Monte Carlo batch on the circle scenario with per-trial metrics.

    python3 demos/small_monte_carlo.py [trials]
"""

import sys

from rvio.harness.montecarlo import MonteCarloConfig, monte_carlo


def main(trials=5):
    res = monte_carlo(MonteCarloConfig(trials=trials))
    print(f"{'seed':>5s} {'ori deg':>8s} {'pos m':>7s} {'NEES ori':>9s} {'NEES pos':>9s}")
    for tr in res.trials:
        n_o, n_p = tr.eval.average_nees(res.nees_skip)
        print(f"{tr.seed:5d} {tr.eval.rmse_orientation_deg:8.3f} {tr.eval.rmse_position:7.3f} {n_o:9.2f} {n_p:9.2f}")
    s = res.summary()
    print(f"{'all':>5s} {s['rmse_orientation_deg']:8.3f} {s['rmse_position_m']:7.3f} "
          f"{s['nees_orientation']:9.2f} {s['nees_position']:9.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
