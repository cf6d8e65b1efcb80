"""Lattice statics toolkit.

Atomistic stability constants of linearized site potentials, Cauchy-Born
residuals of manufactured deformations, and solvers for the atomistic
Dirichlet problem with implicit-function-theorem bookkeeping.
"""

from .continuum import ManufacturedDeformation, PolynomialPerturbation, TrigPerturbation
from .harness import ExperimentConfig, fit_rate, load_config, run_experiment
from .lattice import Ball, Box, DiscreteField, InteractionStencil, LatticeDomain, Polygon
from .potentials import (FTMassSpring, Harmonic, LennardJones, LinearizationTensor, Morse,
                         PairSum, QuadraticForm, UserComposite, linearize, triangular_pair_potential)
from .solver import (OUT_OF_DOMAIN, AtomisticProblem, certify_minimizer, energy, ift_constants,
                     manufactured_problem, solve_bvp)
from .stability import lambda_atom, lambda_lh, lambda_lh_tilde

__version__ = "0.1.0"

__all__ = [
    "AtomisticProblem", "Ball", "Box", "DiscreteField", "ExperimentConfig", "FTMassSpring",
    "Harmonic", "InteractionStencil", "LatticeDomain", "LennardJones", "LinearizationTensor",
    "ManufacturedDeformation", "Morse", "OUT_OF_DOMAIN", "PairSum", "Polygon",
    "PolynomialPerturbation", "QuadraticForm", "TrigPerturbation", "UserComposite",
    "certify_minimizer", "energy", "fit_rate", "ift_constants", "lambda_atom", "lambda_lh",
    "lambda_lh_tilde", "linearize", "load_config", "manufactured_problem",
    "run_experiment", "solve_bvp", "triangular_pair_potential",
]
