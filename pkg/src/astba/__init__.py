"""Failure search for simulated driving policies.

Reinforcement learning drives a black-box simulator toward its most likely
failure; expensive high-fidelity searches are warm-started from failures
found in a cheap low-fidelity twin via a backward curriculum along the
adapted failure trajectory.
"""

from ._backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
