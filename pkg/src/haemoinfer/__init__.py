"""Simulation of 1D elastic vessel networks and parameter inference on the model."""

__version__ = "0.1.0"
