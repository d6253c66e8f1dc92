"""Monte Carlo lab for the within-group variance argument behind reward shaping.

Everything here works with the signed reward ``Y = 2r - 1`` and with centered,
pre-normalization advantages ``A_i = R_i - mean(R)``. An exchangeable group
model draws ``G`` pairs ``(Y_i, phi_i)`` with ``phi_i = 0`` whenever
``Y_i = 1``. The four moments

    C_in  = Cov(Y_i, phi_i)       C_out = Cov(Y_i, phi_j), j != i
    V_in  = Var(phi_i)            V_out = Cov(phi_i, phi_j), j != i

govern how shaping changes the centered advantage variance::

    Var(A_ibpo) - Var(A_gspo) = (1 - 1/G) (lam**2 V_phi - 2 lam C)

with ``C = -(C_in - C_out)`` and ``V_phi = V_in - V_out``. The decrease is
strict for ``0 < lam < 2 C / V_phi``.

Standard errors come from a leave-one-group-out jackknife, so within-group
dependence is respected.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SHAPES = ("constant", "bernoulli", "beta")
COUPLINGS = ("independent", "shared_reference")
REPORT_COLUMNS = ("lambda", "lhs", "lhs_se", "rhs", "lambda_max_hat", "pass", "reduced")
SE_GATE = 4.0


class ConditionViolated(ValueError):
    """Negative correlation or non-degeneracy does not hold."""


@dataclass(frozen=True)
class ExchangeableModel:
    """Group law for (Y, phi).

    ``m`` is the mean of phi given ``Y = -1`` before coupling. Under
    ``shared_reference`` coupling an incorrect member whose group has no other
    correct member (no correct reference to learn from) has its phi scaled by
    ``1 - coupling_strength``. That makes one member's success raise the
    others' phi, so ``C_out > 0``.
    """

    p: float
    m: float
    shape: str = "constant"
    coupling: str = "independent"
    coupling_strength: float = 0.5
    concentration: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if not 0.0 < self.m <= 1.0:
            raise ValueError(f"m must lie in (0, 1], got {self.m}")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")
        if not 0.0 <= self.coupling_strength <= 1.0:
            raise ValueError("coupling_strength must lie in [0, 1]")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")

    def sample(self, G: int, N: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``N`` groups; returns ``(Y, phi)`` of shape ``(N, G)``."""
        if G < 1 or N < 1:
            raise ValueError("need G >= 1 and N >= 1")
        correct = rng.random((N, G)) < self.p
        Y = np.where(correct, 1.0, -1.0)
        if self.shape == "constant":
            raw = np.full((N, G), self.m)
        elif self.shape == "bernoulli":
            raw = (rng.random((N, G)) < self.m).astype(float)
        elif self.m >= 1.0:
            raw = np.ones((N, G))
        else:
            k = self.concentration
            raw = rng.beta(self.m * k, (1.0 - self.m) * k, size=(N, G))
        phi = np.where(correct, 0.0, raw)
        if self.coupling == "shared_reference":
            others = correct.sum(axis=1, keepdims=True) - correct
            phi = np.where(others == 0, phi * (1.0 - self.coupling_strength), phi)
        return Y, phi


@dataclass(frozen=True)
class MomentEstimates:
    C_in: float
    C_out: float
    V_in: float
    V_out: float
    se_C_in: float
    se_C_out: float
    se_V_in: float
    se_V_out: float
    C: float
    V_phi: float
    se_C: float
    se_V_phi: float
    N: int
    G: int


def lemma_cov_closed_form(p: float, m: float) -> float:
    """Cov(Y, phi) = -2 p (1 - p) m for phi vanishing on correct answers."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if m <= 0:
        raise ValueError(f"m must be positive, got {m}")
    return -2.0 * p * (1.0 - p) * m


# -- jackknife over groups ------------------------------------------------------------

def _group_stats(Y: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Per-group means feeding every moment: (Y, phi, Y phi, phi^2, Y_i phi_j, phi_i phi_j)."""
    G = Y.shape[1]
    if G < 2:
        raise ValueError("cross-member moments need G >= 2")
    sY, sP = Y.sum(1), phi.sum(1)
    sYP, sPP = (Y * phi).sum(1), (phi * phi).sum(1)
    pairs = G * (G - 1)
    return np.column_stack([
        sY / G, sP / G, sYP / G, sPP / G,
        (sY * sP - sYP) / pairs,
        (sP * sP - sPP) / pairs,
    ])


def _moments(mu: np.ndarray) -> np.ndarray:
    """Map stacked means (..., 6) to (C_in, C_out, V_in, V_out)."""
    mY, mP, mYP, mPP, mYPx, mPPx = np.moveaxis(mu, -1, 0)
    base = mY * mP
    return np.stack([mYP - base, mYPx - base, mPP - mP * mP, mPPx - mP * mP], axis=-1)


def jackknife(stats: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Bias-corrected jackknife estimate and standard error of ``fn(mean(stats))``.

    ``stats`` holds one row per independent unit; ``fn`` must accept stacked
    means with a leading batch axis.
    """
    stats = np.asarray(stats, dtype=float)
    N = stats.shape[0]
    if N < 2:
        raise ValueError("jackknife needs at least two units")
    total = stats.sum(axis=0)
    full = fn(total / N)
    loo = fn((total[None, :] - stats) / (N - 1))
    loo_mean = loo.mean(axis=0)
    estimate = N * full - (N - 1) * loo_mean
    se = np.sqrt((N - 1) / N * ((loo - loo_mean) ** 2).sum(axis=0))
    return estimate, se


def moments_from_samples(Y: np.ndarray, phi: np.ndarray) -> MomentEstimates:
    Y, phi = np.asarray(Y, float), np.asarray(phi, float)
    if Y.shape != phi.shape or Y.ndim != 2:
        raise ValueError("Y and phi must be (N, G) arrays of equal shape")
    N, G = Y.shape
    stats = _group_stats(Y, phi)

    def derived(mu):
        C_in, C_out, V_in, V_out = np.moveaxis(_moments(mu), -1, 0)
        return np.stack([C_in, C_out, V_in, V_out, C_out - C_in, V_in - V_out], axis=-1)

    est, se = jackknife(stats, derived)
    return MomentEstimates(*map(float, est[:4]), *map(float, se[:4]),
                           C=float(est[4]), V_phi=float(est[5]),
                           se_C=float(se[4]), se_V_phi=float(se[5]), N=N, G=G)


def estimate_moments(model: ExchangeableModel, G: int, N_groups: int,
                     rng: np.random.Generator) -> MomentEstimates:
    """Moments and jackknife SEs from ``N_groups`` fresh groups.

    With constant phi at ``p = 0.5`` the C_in estimate is stationary in the
    sample mean of Y, so its error is second order and the first-order
    jackknife SE understates it. SE gates are meant for non-degenerate laws.
    """
    if G < 2:
        raise ValueError("G must be >= 2")
    if N_groups < 100:
        raise ValueError("N_groups must be >= 100")
    return moments_from_samples(*model.sample(G, N_groups, rng))


# -- the shaping window ---------------------------------------------------------------

def lambda_max(C: float, V_phi: float) -> float:
    """Largest shaping weight 2 C / V_phi that still reduces the variance."""
    if C <= 0:
        raise ConditionViolated(f"need C > 0 (negative correlation), got {C}")
    if V_phi <= 0:
        raise ConditionViolated(f"need V_phi > 0 (non-degenerate shaping), got {V_phi}")
    return 2.0 * C / V_phi


def lambda_max_from_moments(est: MomentEstimates, z: float = 3.0) -> float:
    """lambda_max from estimates, refusing unless C and V_phi are z SEs above zero."""
    if est.C <= z * est.se_C or est.C <= 0:
        raise ConditionViolated(f"C = {est.C:.3g} is not significantly positive (SE {est.se_C:.3g})")
    if est.V_phi <= z * est.se_V_phi or est.V_phi <= 1e-12:
        raise ConditionViolated(f"V_phi = {est.V_phi:.3g} is not significantly positive (SE {est.se_V_phi:.3g})")
    return lambda_max(est.C, est.V_phi)


def predicted_change(lam: float, G: int, C: float, V_phi: float) -> float:
    return (1.0 - 1.0 / G) * (lam * lam * V_phi - 2.0 * lam * C)


def _centered(Y: np.ndarray, phi: np.ndarray):
    return Y - Y.mean(1, keepdims=True), phi - phi.mean(1, keepdims=True)


def _rhs_and_se(est_stats: np.ndarray, lam: float, G: int) -> tuple[float, float]:
    def fn(mu):
        C_in, C_out, V_in, V_out = np.moveaxis(_moments(mu), -1, 0)
        return predicted_change(lam, G, C_out - C_in, V_in - V_out)

    est, se = jackknife(est_stats, fn)
    return float(est), float(se)


@dataclass(frozen=True)
class IdentityCheck:
    lam: float
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    passed: bool

    def __iter__(self):
        # unpacks as (lhs, rhs, pass)
        return iter((self.lhs, self.rhs, self.passed))


def variance_identity_check(model: ExchangeableModel, G: int, lam: float, N_groups: int,
                            rng: np.random.Generator) -> IdentityCheck:
    """Compare the measured variance change with the moment prediction.

    The left side comes from one batch of groups, the moments for the right
    side from an independent batch. On a shared batch the two agree
    algebraically, which would make the check vacuous.
    """
    if G < 2:
        raise ValueError("G must be >= 2")
    rng_lhs, rng_rhs = rng.spawn(2)
    a, b = _centered(*model.sample(G, N_groups, rng_lhs))
    per_group = (2.0 * lam * a * b + lam * lam * b * b).mean(axis=1)
    lhs = float(per_group.mean())
    lhs_se = float(per_group.std(ddof=1) / np.sqrt(N_groups))
    rhs, rhs_se = _rhs_and_se(_group_stats(*model.sample(G, N_groups, rng_rhs)), lam, G)
    passed = abs(lhs - rhs) <= SE_GATE * np.hypot(lhs_se, rhs_se)
    return IdentityCheck(lam, lhs, lhs_se, rhs, rhs_se, bool(passed))


@dataclass(frozen=True)
class FactorCheck:
    G: int
    ratio: float
    se: float
    expected: float
    passed: bool


def covariance_factor_check(model: ExchangeableModel, G: int, N_groups: int,
                            rng: np.random.Generator) -> FactorCheck:
    """Cov(Y_i - Ybar, phi_i - phibar) / (C_in - C_out) against 1 - 1/G.

    Numerator and denominator use independent batches; the ratio's SE is the
    delta-method combination of their SEs.
    """
    if G < 2:
        raise ValueError("G must be >= 2")
    rng_num, rng_den = rng.spawn(2)
    a, b = _centered(*model.sample(G, N_groups, rng_num))
    per_group = (a * b).mean(axis=1)
    num, num_se = per_group.mean(), per_group.std(ddof=1) / np.sqrt(N_groups)
    est = moments_from_samples(*model.sample(G, N_groups, rng_den))
    den, den_se = -est.C, est.se_C
    ratio = num / den
    se = abs(ratio) * np.hypot(num_se / num, den_se / den)
    expected = 1.0 - 1.0 / G
    return FactorCheck(G, float(ratio), float(se), expected, bool(abs(ratio - expected) <= SE_GATE * se))


# -- sweep report ---------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    lam: float
    lhs: float
    lhs_se: float
    rhs: float
    lambda_max_hat: float
    passed: bool

    @property
    def reduced(self) -> bool:
        return self.lhs < 0

    def values(self) -> list:
        return [self.lam, self.lhs, self.lhs_se, self.rhs, self.lambda_max_hat, self.passed, self.reduced]


def variance_sweep_report(model: ExchangeableModel, G: int, lambdas: Sequence[float], N_groups: int,
                          rng: np.random.Generator) -> list[SweepRow]:
    """Identity check across a lambda grid.

    All grid points share one batch of groups (common random numbers), so the
    measured curve is an exact quadratic in lambda and its minimum sits near
    the vertex ``lambda_max / 2``. The moments, and hence the right side and
    ``lambda_max_hat``, come from a second, independent batch.
    """
    grid = [float(x) for x in lambdas]
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    if not all(np.isfinite(grid)) or min(grid) < 0:
        raise ValueError("lambda grid must hold finite values >= 0")
    rng_lhs, rng_rhs = rng.spawn(2)
    a, b = _centered(*model.sample(G, N_groups, rng_lhs))
    ab, bb = (a * b).mean(axis=1), (b * b).mean(axis=1)
    stats = _group_stats(*model.sample(G, N_groups, rng_rhs))
    mom = _moments(stats.mean(0))
    C_hat, V_hat = mom[1] - mom[0], mom[2] - mom[3]
    lam_hat = 2.0 * C_hat / V_hat if C_hat > 0 and V_hat > 0 else float("nan")
    rows = []
    for lam in grid:
        per_group = 2.0 * lam * ab + lam * lam * bb
        lhs = float(per_group.mean())
        lhs_se = float(per_group.std(ddof=1) / np.sqrt(N_groups))
        rhs, rhs_se = _rhs_and_se(stats, lam, G)
        passed = abs(lhs - rhs) <= SE_GATE * np.hypot(lhs_se, rhs_se)
        rows.append(SweepRow(lam, lhs, lhs_se, rhs, float(lam_hat), bool(passed)))
    return rows


def format_report(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v
                    for v in r.values()])
    return buf.getvalue()
