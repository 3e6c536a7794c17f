"""Nonlocal p-Laplacian state and source-control solvers (1-D) with
horizon-to-zero convergence experiments against a local reference solver."""

from .grid import Domain, Grid, GridError, build_grid, restrict_to_interior
from .kernel import (Kernel, KernelError, KernelFamily, NormConstant,
                     build_kernel, compute_c_n, eval_kernel)
from .forms import (CoefficientField, FormError, PairTable, assemble_pairs,
                    bh_form, energy, energy_gradient, energy_hessian,
                    form_matrix, lp_norm, phi_p)
from .state import (Control, NonConvergenceError, Optimizer, SolveReport,
                    SolverConfig, StateError, VolumeConstraint,
                    dirichlet_energy, solve_state, variational_residual)
from .local_ref import (LocalEnergyReport, LocalError, LocalGrid, local_bh,
                        local_energy, solve_local)
from .control import (ControlError, ControlReport, CostKind, CostSpec,
                      eval_cost, reduced_gradient, solve_control,
                      solve_local_control)
from .sweep import (ConvergenceRecord, DeltaSchedule, OscillatingSourceSeq,
                    SweepError, run_delta_sweep_control, run_delta_sweep_state,
                    run_gconv_experiment)

__version__ = "0.1.0"
