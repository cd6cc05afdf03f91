"""Simulation and verification laboratory for random walks in space-time random environments."""

__version__ = "0.1.0"
