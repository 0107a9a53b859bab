"""Score-based samplers with L2-accurate score estimates, theory bounds and analytic checks."""

__version__ = "0.1.0"
