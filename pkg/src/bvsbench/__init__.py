"""bvsbench: a DMD-projection test bench simulator for brain-inspired vision sensors.

Pipeline: stimulus -> encoder (binary mirror planes) -> projector (photon
field) -> sensor models (dual-pathway intensity/difference chip, event camera)
-> characterization protocols and dataset conversion.
"""

from ._kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
