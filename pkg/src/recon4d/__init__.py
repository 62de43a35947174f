"""Recurrent feed-forward reconstruction of dynamic driving scenes into 4D Gaussians."""
from .errors import ContractError, DivergenceError, FormatError, ShapeError, SingularError

__version__ = "0.1.0"

__all__ = ["ContractError", "DivergenceError", "FormatError", "ShapeError", "SingularError", "__version__"]
