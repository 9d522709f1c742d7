"""Variational autoencoder with a learned two-level hierarchical prior.

Training runs under a constrained-optimisation schedule (reconstruction-error
weighted objective or a fixed-multiplier variant), and the learned latent
space supports graph-based interpolation between encoded points.
"""

from .estimator import HierarchicalPriorVAE

__version__ = "0.1.0"

__all__ = ["HierarchicalPriorVAE", "__version__"]
