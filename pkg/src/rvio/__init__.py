"""Robocentric visual-inertial odometry filter with observability and simulation tooling."""

__version__ = "0.1.0"
