"""Latent space refinement toolkit for 2D normalizing-flow generators.

Train a RealNVP flow on a toy density, learn a post-hoc classifier whose
likelihood-ratio weights correct the generated density, pull those weights
back to the latent space, and draw unweighted refined samples either with
Hamiltonian Monte Carlo or with a weighted-loss GAN mapping an auxiliary
latent space onto the reweighted one. Histogram JSD / exact EMD scoring and
a connected-components topology check quantify the improvement.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DivergenceError

__all__ = ["ConfigError", "ContractError", "DivergenceError", "__version__"]
