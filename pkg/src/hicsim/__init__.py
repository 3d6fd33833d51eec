"""Simulator for hybrid in-memory-computing DNN training on PCM arrays."""

__version__ = "0.1.0"
