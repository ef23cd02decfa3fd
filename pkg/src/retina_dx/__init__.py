"""Healthy vs. diabetic-retinopathy fundus classification with a from-scratch CNN."""

__version__ = "0.1.0"
