"""Foreground-aware training objectives for 3D virtual staining, at desk scale."""

from spotlight.errors import SpotlightError
from spotlight.volume import LabelVolume, MaskVolume, Volume

__all__ = ["LabelVolume", "MaskVolume", "SpotlightError", "Volume"]
__version__ = "0.1.0"
