"""Rib instance assignment, rib length measurement and stump rib classification on labelled CT masks."""

from .volume import LabelVolume, load, save

__version__ = "0.1.0"
__all__ = ["LabelVolume", "load", "save", "__version__"]
