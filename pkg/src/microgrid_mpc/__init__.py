"""Convex MPC dynamic optimal power flow for battery storage in an islanded microgrid."""

__version__ = "0.1.0"
