"""Group spike-and-slab variational Bayes for Gaussian, Binomial and Poisson regression."""

from .cavi import FitConfig, FitResult, fit
from .mcmc import GibbsConfig, run_gibbs
from .model import Family, GroupedDesign, GsvbPrior, VariationalKind, VariationalState

__version__ = "0.1.0"

__all__ = [
    "Family",
    "FitConfig",
    "FitResult",
    "GibbsConfig",
    "GroupedDesign",
    "GsvbPrior",
    "VariationalKind",
    "VariationalState",
    "fit",
    "run_gibbs",
]
