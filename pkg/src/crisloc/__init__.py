"""CSI fingerprint localization that keeps working when access points move.

Stages: ``synth`` simulates captures, ``preprocess`` builds radio maps,
``locate`` matches fingerprints, ``detect`` finds altered APs,
``reconstruct`` rebuilds their part of the map, ``evaluation`` scores it all.
"""
__version__ = "0.1.0"

from .kernels import BACKEND
from .model import CrislocError, Fingerprint, Position, RadioMap, SubcarrierMask

__all__ = ["BACKEND", "CrislocError", "Fingerprint", "Position", "RadioMap",
           "SubcarrierMask", "__version__"]
