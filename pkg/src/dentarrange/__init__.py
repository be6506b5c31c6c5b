"""Tooth arrangement on point clouds: geometry, collision, network, losses, data and metrics."""

__version__ = "0.1.0"
