"""Group-wise preference optimisation with a memory-efficient surrogate loss."""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
