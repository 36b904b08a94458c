"""Model reduction with parametrized locally invariant manifolds.

Precompute atlases of locally invariant sheets over blocks of coarse
phase space, then evolve a closed coarse theory on them with sheet
selection, interblock transfer, pruning, and singularity handling.
"""

from .anneal import AnnealConfig, minimize
from .atlas import (Atlas, Block, Sheet, load_atlas, save_atlas, select_sheet,
                    sheet_eval, sheet_grad)
from .core import (ConservedQuantity, CoarseRun, DriverOptions,
                   EvolutionState, FineSystem, ProjectionMap,
                   coarse_integrate, coarse_rhs, conserved_rate_check,
                   detect_singularity, fine_integrate, lift_trajectory,
                   perturb_singular)
from .gsolve import (GEquation, LsfemProblem, SolveSettings,
                     assemble_objective, prune_complex, solve_sheet)

__version__ = "0.1.0"
