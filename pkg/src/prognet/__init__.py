"""Anytime image classification: a progressive multi-stage network with
per-stage decision heads, a recurrent confidence controller for early
termination, and evaluation of the complexity-accuracy trade-off."""

__version__ = "0.1.0"
