"""Oscillator networks coupled to continuum harmonic thermostats."""

__version__ = "0.1.0"
