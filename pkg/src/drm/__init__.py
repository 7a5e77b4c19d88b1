"""Balanced-batch training and exact causal analysis for correlation shift."""

from .data import (CANONICAL_NAMES, CANONICAL_RHOS, EnvDataset, EnvSpec,
                   canonical_env_specs, export_csv, latent_joint, latent_scm,
                   make_environment, split_train_val)
from .exact import (BoundReport, HypothesisClass, ProbTable, ScmSpec, balance,
                    bayes_domain_accuracy, bayes_label_accuracy,
                    check_assumption1, correlation_shift_measure,
                    h_divergence_brute_force, h_divergence_complete,
                    h_divergence_finite, joint, lambda_term,
                    lambda_term_population, random_scm, risk, risk_balanced,
                    theorem1_check, theorem1_check_class, vc_bound_term,
                    vc_dimension, x_marginal)
from .core import (MatchIndex, PooledData, Stage1Hyper, Stage1Model,
                   acceptance_from_frequencies, balance_batch,
                   balance_validation, binary_correlation, build_match_index,
                   calibrate_acceptance, export_representations,
                   extract_representations, linear_probe_accuracy, match,
                   match_many, stack_environments, train_stage1)
from .nn import (Mlp, OptimState, backward, cross_entropy_with_grad,
                 grad_check, mlp_forward, optimizer_step)
from .train import (TrainerConfig, evaluate, groupdro_update, penalty_vrex,
                    train_drm, train_erm)
from .harness import (ResultTable, SweepConfig, balance_statistics,
                      parse_config, report, run_sweep, sample_hparams,
                      select_model, summarize, verify_theory)

__version__ = "0.1.0"
