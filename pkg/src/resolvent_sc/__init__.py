"""
Resolvent self-consistency toolkit.

Exact-diagonalization oracles, mean-field and parametric (Lorentzian, Gaussian,
Voigt-LG, effective Faddeeva) self-consistency solvers for overlap
distributions of perturbed eigenstates, third-order cross-term diagnostics and
a reproducible command-line pipeline.
"""
from . import ansatz, corrections, meanfield, model, oracle, specfun
from .model import CoupledSystem, build_banded_ensemble, build_ising_chain
from .oracle import diagonalize, overlaps, smooth_distribution

__version__ = "0.1.0"

__all__ = [
    "ansatz",
    "corrections",
    "meanfield",
    "model",
    "oracle",
    "specfun",
    "CoupledSystem",
    "build_banded_ensemble",
    "build_ising_chain",
    "diagonalize",
    "overlaps",
    "smooth_distribution",
]
