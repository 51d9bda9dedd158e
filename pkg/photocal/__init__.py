"""Simulation and estimation toolkit for few-photon detector calibration."""

__version__ = "0.1.0"
