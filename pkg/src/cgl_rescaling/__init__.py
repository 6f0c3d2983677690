"""Dynamic rescaling laboratory for blowup in the complex Ginzburg-Landau equation."""

from .profiles import Parameters, validate_params, derive_constants

__version__ = "0.1.0"

__all__ = ["Parameters", "validate_params", "derive_constants", "__version__"]
