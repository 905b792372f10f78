"""Observability of the linearized robocentric model on a few motions.

Prints nullity, residuals of the analytic null directions and the
scale-direction residual for a generic circle, a stationary platform and a
decelerating straight line without rotation.

    python3 demos/observability_report.py
"""

from rvio import observability as ob
from rvio.simulator import SceneSpec, TrajectorySpec, generate

BOX = SceneSpec(placement="random_box", feature_count=400, box_min=(-10.0, -30.0, -6.0), box_max=(10.0, -10.0, 6.0))

CASES = [
    ("circle", TrajectorySpec(kind="circle", duration=10.0), SceneSpec(feature_count=400)),
    ("stationary", TrajectorySpec(kind="stationary", duration=10.0), BOX),
    ("deceleration", TrajectorySpec(kind="no_rotation_decel", duration=10.0, speed=1.5,
                                    attitude=(0.0, 0.0, 0.0)), BOX),
]


def main():
    print(f"{'case':>13s} {'label':>40s} {'nullity':>8s} {'pinned':>7s} {'basis res':>10s} {'scale res':>10s}")
    for name, traj, scene in CASES:
        sim = generate(traj, scene)
        h = ob.history_from_truth(sim.truth, 0, None)
        L = ob.default_landmarks(h)[0]
        label = ob.motion_classifier(sim.truth)
        rep = ob.build_observability_matrix(h, L, motion_label=label)
        pin = ob.build_observability_matrix(h, L, pin_reference_orientation=True)
        print(f"{name:>13s} {label:>40s} {rep.nullity:8d} {pin.effective_nullity:7d} "
              f"{rep.claimed_residual:10.1e} {rep.scale_residual:10.1e}")


if __name__ == "__main__":
    main()
