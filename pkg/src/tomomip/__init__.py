"""Tomographic reconstruction of homogeneous materials with a learned edge
network compiled into mixed-integer programs."""

__version__ = "0.1.0"
