"""Feasibility-guided adversarial scenario generation on a 2-D traffic simulator."""

__version__ = "0.1.0"
