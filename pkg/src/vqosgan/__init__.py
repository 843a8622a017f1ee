"""Network-state estimation and frame restoration from degraded video frames.

Submodules: ``autograd`` (tensor engine), ``emulator`` (degradation),
``synth`` and ``corpus`` (data), ``models``, ``gan`` and ``baseline``
(networks and training), ``evaluation`` and ``plotting`` (reports) and
``cli`` (command line).
"""

__version__ = "0.1.0"

from .emulator import NetworkState, RateConfig, degrade
from .errors import DataError, NumericError

__all__ = ["DataError", "NetworkState", "NumericError", "RateConfig", "__version__", "degrade"]
