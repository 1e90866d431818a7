"""Simulation and optimization of destination-to-chute task mappings for robotic sorting floors."""

__version__ = "0.1.0"
