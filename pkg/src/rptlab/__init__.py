"""Resample-previous-tokens sampling, with Markov analysis and toy-model experiments."""

from ._version import __version__
from .errors import RptLabError

__all__ = ["__version__", "RptLabError"]
