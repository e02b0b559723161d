"""Physics-informed networks for unique-continuation (data assimilation) problems."""
from . import autodiff, network, problems, quadrature, training

__version__ = "0.1.0"

__all__ = ["autodiff", "network", "problems", "quadrature", "training", "__version__"]
