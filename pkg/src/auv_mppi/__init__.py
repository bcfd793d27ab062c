"""Model Predictive Path Integral control for a 6-DOF underwater vehicle."""

__version__ = "0.1.0"
