"""Stereo visual-inertial odometry with learned per-feature covariance scaling."""

__version__ = "0.1.0"
