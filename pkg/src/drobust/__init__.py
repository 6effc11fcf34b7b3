"""Distributionally robust off-policy evaluation and learning from logged bandit data."""

from .core import (EPS_ALPHA, KL, CressieRead, Dataset, DivergenceSpec, EvalTheta, FDivergence,
                   FoldAssignment, LoggedSample, crossfit_split, make_rng, read_dataset_csv,
                   split_half, write_dataset_csv)
from .dual import (DiscreteRewardDist, DualResult, FDualPoint, RewardCurve, kl_lambda_star,
                   maximize_cressie_read, maximize_f_dual, maximize_kl_dual, phi_cressie_read, phi_f,
                   phi_kl, phi_kl_derivative, tilted_worst_case, w_moment)
from .errors import (ConfigurationError, DataError, DegenerateFitError, DegenerateWeightsError,
                     DomainError, DrNegativeWError, DrobustError, OptimizationFailure, OverlapError,
                     ShapeError)
from .policy import (LinearSoftmaxPolicy, MLPSoftmaxPolicy, Policy, TabularPolicy, policy_probs)
from .weighted import (Regime, WeightedSample, degeneracy_classify, ips_value, snips_value,
                       weighted_dro_value)
from .nuisance import NuisanceSpec, fit_continuum_weights, fit_outcome_localized, fit_propensity
from .ldrope import LdropeConfig, LdropeResult, ldr2ope
from .cdrople import LearnConfig, LearnResult, build_dr_objective, cdr2opl, policy_gradient_W
from .simulator import (DiscreteEnv, Softmax5Env, make_env, oracle_regret, oracle_value, sample_dataset,
                        target_policy)

__version__ = "0.1.0"
