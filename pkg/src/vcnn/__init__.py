"""Volumetric CNN age-cohort classifier for pediatric brain MRI, on numpy.

Submodules: :mod:`tensor`, :mod:`layers`, :mod:`model`, :mod:`train`,
:mod:`niftio`, :mod:`metrics` and the :mod:`cli` entry point.
"""

from ._accel import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
