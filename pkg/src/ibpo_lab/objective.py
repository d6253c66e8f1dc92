"""Shaped rewards, group advantages and the GSPO-style clipped objectives.

Gradients are assembled analytically. For a sequence ratio
``s = exp(sum_t m_t (new_t - old_t) / M)`` the surrogate's derivative with
respect to the log-prob of token t is ``dL/ds * s * m_t / M`` and is pushed
through the policy's score function.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .core_types import GroupBatch, Trajectory
from .counterfactual import RHO, ComparisonOutcome
from .env_chain import CorrectionContext, TaskInstance
from .policy import (
    Mode,
    PolicyParams,
    SparseGradient,
    accumulate_score,
    token_logprobs,
    trajectory_rows,
)

STD_FLOOR = 1e-8


class ObjectiveVariant(str, Enum):
    GSPO = "GSPO"
    IBPO_BASE = "IBPO_BASE"
    IBPO_RATIO = "IBPO_RATIO"
    IBPO_MASK = "IBPO_MASK"


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.6
    epsilon: float = 0.2
    eta: float = 1.0
    variant: ObjectiveVariant = ObjectiveVariant.IBPO_BASE
    group_size: int = 8
    correction_group_size: int = 4
    std_floor: float = STD_FLOOR
    rho: float = RHO

    def __post_init__(self):
        object.__setattr__(self, "variant", ObjectiveVariant(self.variant))
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        max_delta = 1.0 if self.variant == ObjectiveVariant.IBPO_RATIO else self.rho
        if self.lam * max_delta >= 1:
            raise ValueError(f"lambda * max shaping ({self.lam} * {max_delta}) must stay below 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.group_size < 1 or self.correction_group_size < 1:
            raise ValueError("group sizes must be >= 1")

    def with_(self, **kw) -> "ObjectiveConfig":
        return replace(self, **kw)


@dataclass
class CorrectionGroup:
    """G_c correction outputs sharing one correction input."""

    context: CorrectionContext
    outputs: list[Trajectory] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([z.terminal_reward for z in self.outputs], dtype=float)


def shaped_reward(r: float, delta: float, lam: float) -> float:
    if lam * delta >= 1:
        raise ValueError(f"lambda * delta = {lam * delta} must stay below 1")
    return r + lam * delta


def group_advantages(rewards: Sequence[float], std_floor: float = STD_FLOOR) -> np.ndarray:
    """(r - mean) / (population std + floor) within one group."""
    r = np.asarray(rewards, dtype=float)
    return (r - r.mean()) / (r.std() + std_floor)


def _check_lengths(new, old):
    if len(new) != len(old) or len(new) < 1:
        raise ValueError(f"log-prob lists must have equal length >= 1 ({len(new)} vs {len(old)})")


def gspo_ratio(new_logps: Sequence[float], old_logps: Sequence[float]) -> float:
    """Length-normalized sequence ratio (pi / pi_old) ** (1 / T)."""
    _check_lengths(new_logps, old_logps)
    diff = np.asarray(new_logps, float) - np.asarray(old_logps, float)
    return float(np.exp(diff.sum() / len(diff)))


def masked_ratio(new_logps: Sequence[float], old_logps: Sequence[float], mask: Sequence[int]) -> float:
    _check_lengths(new_logps, old_logps)
    if len(mask) != len(new_logps):
        raise ValueError("mask length must match the log-prob lists")
    m = np.asarray(mask, float)
    diff = np.asarray(new_logps, float) - np.asarray(old_logps, float)
    return float(np.exp((m * diff).sum() / max(1.0, m.sum())))


def clipped_surrogate(s, A, epsilon: float):
    return np.minimum(s * A, np.clip(s, 1 - epsilon, 1 + epsilon) * A)


def surrogate_slope(s, A, epsilon: float):
    """d/ds of the clipped surrogate; ties take the unclipped branch."""
    s, A = np.asarray(s, float), np.asarray(A, float)
    unclipped = s * A <= np.clip(s, 1 - epsilon, 1 + epsilon) * A
    return np.where(unclipped, A, 0.0)


def _surrogate_and_grad(params: PolicyParams, rows: np.ndarray, tokens: np.ndarray,
                        old: np.ndarray, masks: np.ndarray, adv: np.ndarray,
                        epsilon: float, weight: float):
    """weight * sum_i clipped(s_i, A_i) and its dense gradient."""
    new, probs = token_logprobs(params, rows, tokens)
    M = np.maximum(1.0, masks.sum(axis=1))
    s = np.exp((masks * (new - old)).sum(axis=1) / M)
    J = weight * float(np.sum(clipped_surrogate(s, adv, epsilon)))
    coef = weight * surrogate_slope(s, adv, epsilon) * s / M
    dense = accumulate_score(params, rows, tokens, probs, coef[:, None] * masks)
    return J, dense, s


def main_objective(task: TaskInstance, group: GroupBatch, comparisons: Sequence[ComparisonOutcome] | None,
                   params: PolicyParams, cfg: ObjectiveConfig):
    """J_x = (1/G) sum_i min(s_i A_i, clip(s_i) A_i) for one prompt.

    ``group.advantages`` must already be filled. Old log-probs come from each
    trajectory's ``logprobs_old``. Under IBPO_MASK a comparison's mask replaces
    the full ratio; members without a mask keep the full ratio.
    """
    if group.advantages is None:
        raise ValueError("fill group advantages before building the objective")
    tokens = np.array([t.tokens for t in group.trajectories], dtype=int)
    old = np.array([t.logprobs_old for t in group.trajectories], dtype=float)
    masks = np.ones(tokens.shape)
    if cfg.variant == ObjectiveVariant.IBPO_MASK and comparisons is not None:
        for i, c in enumerate(comparisons):
            if c is not None and c.mask is not None:
                masks[i] = c.mask
    rows = trajectory_rows(task, Mode.BASE, tokens)
    adv = np.asarray(group.advantages, float)
    J, dense, _ = _surrogate_and_grad(params, rows, tokens, old, masks, adv,
                                      cfg.epsilon, 1.0 / group.size)
    return J, SparseGradient.from_dense(dense)


def correction_objective(corr_groups: Sequence[CorrectionGroup], params: PolicyParams,
                         cfg: ObjectiveConfig):
    """Mean over correction groups of each group's own clipped surrogate.

    Advantages are normalized inside each group only; empty groups are skipped.
    """
    groups = [g for g in corr_groups if g.outputs]
    if not groups:
        return 0.0, SparseGradient.empty(params.V)
    total_J = 0.0
    dense = np.zeros_like(params.logits)
    w = 1.0 / len(groups)
    for g in groups:
        task = g.context.task
        tokens = np.array([z.tokens for z in g.outputs], dtype=int)
        old = np.array([z.logprobs_old for z in g.outputs], dtype=float)
        adv = group_advantages(g.rewards, cfg.std_floor)
        rows = trajectory_rows(task, Mode.CORRECTION, tokens, g.context)
        J, d, _ = _surrogate_and_grad(params, rows, tokens, old, np.ones(tokens.shape), adv,
                                      cfg.epsilon, w / len(g.outputs))
        total_J += J
        dense += d
    return total_J, SparseGradient.from_dense(dense)


def total_objective(J_main: float, grad_main: SparseGradient, J_corr: float,
                    grad_corr: SparseGradient, eta: float):
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if eta == 0:
        return J_main, grad_main
    return J_main + eta * J_corr, grad_main + grad_corr.scale(eta)
