__all__ = [
    "load_bundled_case",
    "load_case",
    "NetworkModel",
    "StateVector",
]

from .casefile import load_bundled_case, load_case
from .grid import NetworkModel, StateVector
