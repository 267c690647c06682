"""Attentive recurrent neural cellular automata."""

__version__ = "0.1.0"
