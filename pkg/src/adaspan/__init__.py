"""Adaptive-span stable transformer agents with a V-trace actor-learner."""

__version__ = "0.1.0"
