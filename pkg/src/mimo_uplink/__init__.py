"""Massive-MIMO OFDM uplink receiver: windowed LMMSE channel estimation,
linear MIMO detection, a threaded UDP slot pipeline and a Monte Carlo harness."""

from .grid import SystemConfig

__version__ = "0.1.0"

__all__ = ["SystemConfig", "__version__"]
