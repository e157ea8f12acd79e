"""Numerical laboratory for sectional-expansion diagnostics of glued
solenoid suspension flows and their planar and cylindrical building blocks."""

__version__ = "0.1.0"
