"""Statistical inference for performative prediction."""
from .distributions import (Atlas, DistributionMap, ParamBox, SampleSet, Theta, build_family,
                            make_gaussian_atlas, make_gaussian_location, make_linear_atlas,
                            make_location_family, sample)
from .experiments import (CoverageReport, ExperimentConfig, QQData, qq_data, run_coverage_optimal,
                          run_coverage_stable)
from .optimal import (GaussianProposal, PairedData, PluginOptimum, PolynomialRegressor, ProposalError,
                      RecalibratedFit, RegressorSpec, beta_covariance, decorrelation_matrix,
                      draw_paired_data, erm_beta, error_gap_bound, fit_conditional_gradient,
                      optimum_covariance, plugin_inference, plugin_jacobian, plugin_optimum,
                      recalibrated_beta, recalibrated_fold_beta, uniform_design)
from .rng import RngStream
from .solvers import (BoundaryWarning, FocResult, GameSpec, SolveOptions, SolverError,
                      contraction_coefficient, fixed_point_iterate, solve_empirical_foc,
                      squared_loss_game)
from .stable import (ConfidenceReport, ErrTrajectory, accumulate_covariance, err_run,
                     estimate_sol_jacobian, sandwich_step_covariance, stable_confidence_intervals)

__version__ = "0.1.0"
