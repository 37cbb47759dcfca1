"""Event-based over-relaxed ADMM: simulators, bound checks and rate certificates."""

__version__ = "0.1.0"
