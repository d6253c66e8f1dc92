"""Reward shaping from counterfactual corrections on a GSPO-style optimizer, at desk scale.

The package is organised bottom-up:

* ``core_types``: trajectories, groups, reward recoding, JSONL records
* ``env_chain``: the arithmetic-chain task, its verifier and an oracle corrector
* ``policy``: a log-linear tabular policy with BASE and CORRECTION modes
* ``counterfactual``: references, edit-distance alignment, rewrite filter, shaping
* ``objective``: shaped rewards, group advantages, clipped sequence-ratio objectives
* ``trainer``: the training loop, compute accounting and metrics
* ``analysis``: Monte Carlo checks of the within-group variance identities
* ``cli``: ``ibpo-lab {train,variance,ablate,report}``
"""
from .analysis import (
    ConditionViolated,
    ExchangeableModel,
    MomentEstimates,
    covariance_factor_check,
    estimate_moments,
    lambda_max,
    lemma_cov_closed_form,
    variance_identity_check,
    variance_sweep_report,
)
from .core_types import GroupBatch, Trajectory, TrajectoryError, to_signed_reward, validate_trajectory
from .counterfactual import (
    ComparisonOutcome,
    OracleCorrector,
    PolicyCorrector,
    Variant,
    compare,
    detect_rewrite,
    edit_distance,
    token_mask,
    unchanged_set,
)
from .env_chain import CorrectionContext, Op, TaskInstance, make_task, oracle_correct, oracle_solution, verify
from .objective import (
    CorrectionGroup,
    ObjectiveConfig,
    ObjectiveVariant,
    clipped_surrogate,
    correction_objective,
    group_advantages,
    gspo_ratio,
    main_objective,
    masked_ratio,
    shaped_reward,
    total_objective,
)
from .policy import Mode, PolicyParams, SparseGradient, apply_update, log_prob, sample_trajectory
from .trainer import (
    METRICS_COLUMNS,
    ConfigError,
    CorrectorConfig,
    EnvConfig,
    Method,
    PolicyConfig,
    RunConfig,
    compute_units,
    init_state,
    run_iteration,
    train,
    units_to_threshold,
)

__version__ = "0.1.0"
