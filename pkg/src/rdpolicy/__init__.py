"""Decentralized reactive-power policies bounded by rate-distortion analysis."""

from .errors import (AlphabetExplosion, Infeasible, InfeasibleRow, RDPolicyError, ResourceGuard,
                     ValidationError)
from .grid import (Bus, Injection, Line, RadialNetwork, load_network, save_network, solve_flow, solve_opf,
                   validate_network, voltage_sensitivity)
from .gaussian_rd import (GaussianEnsemble, conditional_regressor, gaussian_mi, minimal_distortion,
                          optimal_stddev_shrinkage)
from .mi import DiscretizationScheme, build_mi_matrix, discretize, entropy_est, mi_est, mi_joint_est
from .comm import GaussianOracle, SampleOracle, distortion_vs_k_curve, select_exhaustive, select_greedy
from .policy import AgentPolicy, PolicySet, evaluate_policy_set, predict, stepwise_select
from .scenario import (LoadProfileSpec, TimeSeriesDataset, gen_feeder_timeseries, gen_gaussian_dataset,
                       label_with_opf)
from .report import EvalReport
from .harness import ExperimentConfig, run

__version__ = "0.1.0"
