"""Compare-and-correct operator: references, alignment, rewrite filter, shaping."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np

from .core_types import GroupBatch, TokenMask, Trajectory
from .env_chain import CorrectionContext, TaskInstance, oracle_correct, verify
from .policy import Mode, PolicyParams, sample_tokens

RHO = 0.5
DEFAULT_ALPHA = 0.6


class Variant(str, Enum):
    BASE = "base"
    RATIO = "ratio"
    MASK = "mask"


@dataclass(frozen=True)
class Alignment:
    distance: int
    normalized: float
    matched_pairs: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ComparisonOutcome:
    s: float
    delta: float
    mask: TokenMask | None
    rewrite: bool
    corrected: Trajectory | None
    corrected_reward: int
    reference_index: int | None = None
    distance: float | None = None

    def log_fields(self) -> dict:
        return {
            "s": self.s,
            "mask": None if self.mask is None else list(self.mask),
            "rewrite": self.rewrite,
            "corrected_reward": self.corrected_reward,
        }


NO_COMPARISON = ComparisonOutcome(0.0, 0.0, None, False, None, 0)


def sample_reference(group: GroupBatch, target_index: int, rng: np.random.Generator) -> int | None:
    """Uniform over correct members, else over the other incorrect members."""
    rewards = [t.terminal_reward for t in group.trajectories]
    if rewards[target_index] != 0:
        raise ValueError("references are only drawn for incorrect targets")
    if len(rewards) == 1:
        return None
    correct = [j for j, r in enumerate(rewards) if r == 1]
    pool = correct or [j for j, r in enumerate(rewards) if r == 0 and j != target_index]
    return pool[int(rng.integers(len(pool)))]


def edit_distance(a: Sequence[int], b: Sequence[int]) -> Alignment:
    """Unit-cost Levenshtein distance with one deterministic optimal traceback.

    Traceback ties prefer match, then substitute, then delete (from ``a``),
    then insert.
    """
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        ai = a[i - 1]
        row, up = D[i], D[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (ai != b[j - 1]), up[j] + 1, row[j - 1] + 1)
    pairs = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and D[i][j] == D[i - 1][j - 1]:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + 1:
            i, j = i - 1, j - 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    longest = max(n, m)
    return Alignment(D[n][m], D[n][m] / longest if longest else 0.0, tuple(reversed(pairs)))


def normalized_distance(a: Sequence[int], b: Sequence[int]) -> float:
    return edit_distance(a, b).normalized


def unchanged_set(y: Sequence[int], yhat: Sequence[int]) -> set[int]:
    return {i for i, _ in edit_distance(y, yhat).matched_pairs}


def token_mask(y: Sequence[int], yhat: Sequence[int]) -> TokenMask:
    keep = unchanged_set(y, yhat)
    return tuple(0 if t in keep else 1 for t in range(len(y)))


def rewrite_from_distances(d_target: float, d_reference: float | None, alpha: float) -> bool:
    if d_reference is None:
        return False
    return d_target > alpha and d_target > d_reference


def detect_rewrite(y: Sequence[int], yhat: Sequence[int], y_ref: Sequence[int] | None, alpha: float) -> bool:
    """Full rewrite: far from the original and closer to the reference than to it.

    Without a reference there is nothing to copy, so nothing is flagged.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    d_ref = None if y_ref is None else normalized_distance(yhat, y_ref)
    return rewrite_from_distances(normalized_distance(y, yhat), d_ref, alpha)


def adaptive_threshold(distances: Sequence[float]) -> float:
    """mean + 2 * population std of a batch of normalized distances, clamped to (0, 1]."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise ValueError("adaptive threshold needs at least one distance")
    alpha = float(d.mean() + 2.0 * d.std())
    return min(max(alpha, np.finfo(float).tiny), 1.0)


def shaping_base(r: int, r_hat: int, rewrite: bool, rho: float = RHO) -> float:
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return rho if (r == 0 and r_hat == 1 and not rewrite) else 0.0


def shaping_ratio(r: int, r_hat: int, rewrite: bool, U_size: int, T: int) -> float:
    if T < 1 or not 0 <= U_size <= T:
        raise ValueError(f"need 0 <= U_size <= T and T >= 1, got U_size={U_size}, T={T}")
    return U_size / T if (r == 0 and r_hat == 1 and not rewrite) else 0.0


# -- correctors ------------------------------------------------------------------

class Corrector(Protocol):
    def __call__(self, ctx: CorrectionContext, n: int, rng: np.random.Generator) -> list[Trajectory]:
        ...


@dataclass
class OracleCorrector:
    """Environment oracle repair with success probability ``q``."""

    q: float = 0.8

    def __call__(self, ctx, n, rng):
        return [oracle_correct(ctx.task, ctx.target, self.q, rng) for _ in range(n)]


@dataclass
class PolicyCorrector:
    """Samples CORRECTION-mode outputs from the (frozen) behavior policy."""

    params: PolicyParams

    def __call__(self, ctx, n, rng):
        return self.sample_many([ctx] * n, rng)

    def sample_many(self, ctxs: Sequence[CorrectionContext], rng) -> list[Trajectory]:
        task = ctxs[0].task
        tokens, logps = sample_tokens(self.params, task, Mode.CORRECTION, len(ctxs), rng, list(ctxs))
        return [Trajectory(tk, lp, verify(task, tk)) for tk, lp in zip(tokens, logps)]


# -- the comparison operator ---------------------------------------------------------

@dataclass(frozen=True)
class CorrectionAttempt:
    """A corrected output and the distances needed to score it."""

    target_index: int
    reference_index: int | None
    corrected: Trajectory
    d_target: float
    d_reference: float | None


def make_attempt(group: GroupBatch, target_index: int, reference_index: int | None,
                 corrected: Trajectory) -> CorrectionAttempt:
    y = group.trajectories[target_index].tokens
    d_ref = None
    if reference_index is not None:
        d_ref = normalized_distance(corrected.tokens, group.trajectories[reference_index].tokens)
    return CorrectionAttempt(target_index, reference_index, corrected,
                             normalized_distance(y, corrected.tokens), d_ref)


def score_attempt(group: GroupBatch, attempt: CorrectionAttempt, variant: Variant,
                  alpha: float, rho: float = RHO, rewrite_penalty: float = 0.0) -> ComparisonOutcome:
    """Turn a correction attempt into (s, delta, mask, rewrite)."""
    variant = Variant(variant)
    y = group.trajectories[attempt.target_index]
    r, r_hat = y.terminal_reward, attempt.corrected.terminal_reward
    rewrite = rewrite_from_distances(attempt.d_target, attempt.d_reference, alpha)
    mask = None
    if variant == Variant.RATIO:
        u = len(unchanged_set(y.tokens, attempt.corrected.tokens))
        delta = shaping_ratio(r, r_hat, rewrite, u, len(y))
        s = delta
    else:
        delta = shaping_base(r, r_hat, rewrite, rho)
        s = delta / rho
        if variant == Variant.MASK and delta > 0:
            mask = token_mask(y.tokens, attempt.corrected.tokens)
    if rewrite and rewrite_penalty:
        delta -= rewrite_penalty
    return ComparisonOutcome(s, delta, mask, rewrite, attempt.corrected, r_hat,
                             attempt.reference_index, attempt.d_target)


def compare(group: GroupBatch, task: TaskInstance, target_index: int, variant: Variant,
            corrector: Corrector, rng: np.random.Generator, alpha: float = DEFAULT_ALPHA,
            use_reference: bool = True, rho: float = RHO,
            rewrite_penalty: float = 0.0) -> ComparisonOutcome:
    """Reference draw, correction, re-verification and shaping for one target.

    Correct targets short-circuit to ``s = 0`` without a correction.
    """
    target = group.trajectories[target_index]
    if target.terminal_reward == 1:
        return NO_COMPARISON
    ref_idx = sample_reference(group, target_index, rng) if use_reference else None
    reference = None if ref_idx is None else group.trajectories[ref_idx]
    corrected = corrector(CorrectionContext(task, target, reference), 1, rng)[0]
    corrected = corrected.with_reward(verify(task, corrected.tokens))
    attempt = make_attempt(group, target_index, ref_idx, corrected)
    return score_attempt(group, attempt, variant, alpha, rho, rewrite_penalty)
