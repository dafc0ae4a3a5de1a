"""Phase-space simulation and verification suite for the mesoscopic
FitzHugh-Nagumo network in the strong short-range-interaction regime."""

__version__ = "0.1.0"

from .errors import CFLViolation, ConfigError, ContractViolation

__all__ = ["CFLViolation", "ConfigError", "ContractViolation", "__version__"]
