"""Data-driven model predictive control without terminal ingredients.

Implements Hankel-matrix trajectory parametrization of LTI systems, the
nominal and robust receding-horizon schemes built on it, a self-contained
convex QP solver with certified optimality residuals, and the analysis and
orchestration tools to reproduce the stirred-tank-reactor benchmark study.
"""

from .analysis import (ComparisonReport, IossCertificate, build_ioss_certificate,
                       closed_loop_cost, compare_runs, lyapunov_trace,
                       prediction_error_study, verify_ioss_certificate)
from .behavior import (DataSet, InconsistentWindowError, PersistencyError,
                       add_noise, check_pe, dd_simulate, generate_dataset,
                       generate_pe_input, hankel)
from .lti import (ExtendedLti, ExtendedState, LtiSystem, NotObservableError,
                  Trajectory, cstr_example, equilibrium_output,
                  extend_system, extended_state_window, lag,
                  observability_matrix, simulate)
from .mpc import (ClosedLoopLog, MpcConfig, MpcProblemData, MpcSolution,
                  MpcVariant, add_terminal_equality, build_nominal,
                  build_robust, closed_loop, mpc_solution, precompute,
                  warmup_window)
from .qp import (KktResiduals, QpProblem, QpSettings, QpSolution, QpSolver,
                 QpStatus, kkt_residuals, solve)

__version__ = "0.1.0"
