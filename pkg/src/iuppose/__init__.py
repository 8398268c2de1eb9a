"""Relative camera pose regression with rotation-first homography alignment."""

__version__ = "0.1.0"
