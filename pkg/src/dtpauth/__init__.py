"""RF fingerprinting of QAM transmitters with Density Trace Plots."""

from .core import IqFrame, derive_seed, make_rng

__version__ = "0.1.0"

__all__ = ["IqFrame", "derive_seed", "make_rng", "__version__"]
