"""Gradient variance measurement and Gradient Clustering (GC).

Stratified sampling over a weighted clustering of per-example gradients,
with exact and rank-1 per-layer clustering, baseline gradient-mean
estimators and a desk-scale experiment harness.
"""

from gradclust.numerics import ContractError, NumericalError, RngStream

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericalError", "RngStream", "__version__"]
