"""Multi-type association prediction by tensor completion.

Provides CP-ALS and the relationally constrained decomposition (TDRC),
ontology-based similarity construction, cross-validation protocols and
ranking metrics.
"""
from .tensor import FactorSet, khatri_rao, matricize, reconstruct, refold, residual_norm
from .solvers import (
    CgProblem,
    DivergenceError,
    Hyperparams,
    cg_solve,
    cp_als_fit,
    objective_value,
    predict_scores,
    tdrc_fit,
)

__version__ = "0.1.0"
