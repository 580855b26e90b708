"""Cycle-consistent report and image generation for chest X-rays, with explanation protocols."""

from .errors import ConfigError, CycleXRError, DataError, PreconditionError, ShapeError
from .labels import LABELS, N_LABELS

__version__ = "0.1.0"
