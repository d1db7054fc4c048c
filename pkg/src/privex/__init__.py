"""Simulation and exact analysis of device-independent private randomness expansion."""

__version__ = "0.1.0"
