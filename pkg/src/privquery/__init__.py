"""Simulation and analysis of a cheat-sensitive quantum private-query protocol."""

from .codec import H_25, H_35_6, BitClass, ParityCheckMatrix, Thresholds
from .states import ChannelModel, StateGeometry

__version__ = "0.1.0"

__all__ = ["H_25", "H_35_6", "BitClass", "ChannelModel", "ParityCheckMatrix",
           "StateGeometry", "Thresholds", "__version__"]
