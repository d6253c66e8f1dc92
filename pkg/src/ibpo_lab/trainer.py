"""End-to-end training loop: rollout, compare-and-correct, shaping, one ascent step.

Compute units
-------------
Budgets are counted in abstract units rather than wall-clock time. Generating
token t (1-based) with ``c0`` tokens of extra context costs ``c0 + t + 1``, so
a length-T generation costs ``T (c0 + 1) + T (T + 1) / 2``. Base rollouts have
``c0 = 0``; a correction reads the target and the reference, so its offset is
their combined length. Every verifier call and every comparison costs 1.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_types import GroupBatch, Trajectory, trajectory_record, write_jsonl
from .counterfactual import (
    NO_COMPARISON,
    CorrectionAttempt,
    PolicyCorrector,
    Variant,
    adaptive_threshold,
    make_attempt,
    sample_reference,
    score_attempt,
)
from .env_chain import CorrectionContext, TaskInstance, make_task, oracle_correct, verify
from .objective import (
    CorrectionGroup,
    ObjectiveConfig,
    ObjectiveVariant,
    correction_objective,
    group_advantages,
    main_objective,
    shaped_reward,
    total_objective,
)
from .policy import Mode, PolicyParams, SparseGradient, apply_update, sample_tokens, save_params

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "iteration",
    "compute_units",
    "mean_reward",
    "mean_shaped_reward",
    "correction_success_rate",
    "rewrite_rate",
    "adv_centered_variance",
    "grad_norm",
)


class Method(str, Enum):
    GSPO = "GSPO"
    IBPO_BASE = "IBPO_BASE"
    IBPO_RATIO = "IBPO_RATIO"
    IBPO_MASK = "IBPO_MASK"
    K1 = "K1"
    SHAPING_ONLY = "SHAPING_ONLY"
    PROMPT_ONLY = "PROMPT_ONLY"
    BEST_OF_N = "BEST_OF_N"


_GSPO_TRAINED = {Method.GSPO, Method.PROMPT_ONLY, Method.BEST_OF_N}
_VARIANT = {
    Method.GSPO: ObjectiveVariant.GSPO,
    Method.PROMPT_ONLY: ObjectiveVariant.GSPO,
    Method.BEST_OF_N: ObjectiveVariant.GSPO,
    Method.IBPO_BASE: ObjectiveVariant.IBPO_BASE,
    Method.K1: ObjectiveVariant.IBPO_BASE,
    Method.SHAPING_ONLY: ObjectiveVariant.IBPO_BASE,
    Method.IBPO_RATIO: ObjectiveVariant.IBPO_RATIO,
    Method.IBPO_MASK: ObjectiveVariant.IBPO_MASK,
}
_COMPARE_VARIANT = {
    ObjectiveVariant.IBPO_BASE: Variant.BASE,
    ObjectiveVariant.IBPO_RATIO: Variant.RATIO,
    ObjectiveVariant.IBPO_MASK: Variant.MASK,
}


class ConfigError(ValueError):
    """Invalid run configuration."""


class TrainingAborted(RuntimeError):
    """Non-finite objective or gradient."""


@dataclass
class EnvConfig:
    V: int = 16
    L: int = 4
    task_seed_start: int = 0
    n_tasks: int = 1024
    eval_seed_start: int = 1_000_000
    n_eval: int = 512


@dataclass
class PolicyConfig:
    lr: float = 0.05
    max_len: int | None = None
    skill_bias: float = 1.75
    target_copy_bias: float = 4.0
    ref_copy_bias: float = 4.0


@dataclass
class CorrectorConfig:
    kind: str = "oracle"  # "oracle" | "policy"
    repair_prob: float = 0.8


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    method: Method = Method.IBPO_BASE
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    iterations: int = 200
    batch_size: int = 32
    seed: int = 0
    compute_budget: float | None = None
    group_size: int | None = None  # None: 16 for GSPO-trained methods, else objective.group_size
    best_of_n: int = 8
    alpha: float = 0.6
    alpha_mode: str = "fixed"  # "fixed" | "adaptive"
    rewrite_penalty: float = 0.0
    corrections: bool = True
    trajectory_log_every: int = 10
    checkpoint_every: int = 0
    threshold_window: int = 5
    stop_reward: float | None = None  # stop once the trailing-window mean reward reaches this

    def __post_init__(self):
        try:
            self.method = Method(self.method)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.corrector.kind not in ("oracle", "policy"):
            raise ConfigError(f"unknown corrector {self.corrector.kind!r}")
        if not 0.0 <= self.corrector.repair_prob <= 1.0:
            raise ConfigError("repair_prob must lie in [0, 1]")
        if self.alpha_mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.iterations < 0 or self.batch_size < 1 or self.best_of_n < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and best_of_n >= 1 required")
        if self.policy.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.env.V < 4 or self.env.L < 1:
            raise ConfigError("need V >= 4 and L >= 1")
        if self.policy.max_len is not None and self.policy.max_len < self.env.L + 1:
            raise ConfigError("max_len must be >= L + 1")
        if self.compute_budget is not None and self.compute_budget < 0:
            raise ConfigError("compute_budget must be >= 0")
        if self.threshold_window < 1:
            raise ConfigError("threshold_window must be >= 1")

    # -- derived settings ----------------------------------------------------------
    @property
    def G(self) -> int:
        if self.group_size is not None:
            return self.group_size
        return 16 if self.method in _GSPO_TRAINED else self.objective.group_size

    @property
    def objective_cfg(self) -> ObjectiveConfig:
        eta = 0.0 if self.method == Method.SHAPING_ONLY else self.objective.eta
        return self.objective.with_(variant=_VARIANT[self.method], eta=eta, group_size=self.G)

    @property
    def uses_corrections(self) -> bool:
        return self.corrections and self.method not in _GSPO_TRAINED

    @property
    def uses_reference(self) -> bool:
        return self.method != Method.K1

    @property
    def joint_training(self) -> bool:
        return (self.uses_corrections and self.corrector.kind == "policy"
                and self.uses_reference and self.objective_cfg.eta > 0)

    # -- (de)serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        d["objective"]["variant"] = ObjectiveVariant(d["objective"]["variant"]).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        subs = {"env": EnvConfig, "policy": PolicyConfig, "corrector": CorrectorConfig}
        kwargs = {}
        try:
            for key, sub in subs.items():
                if key in d:
                    kwargs[key] = _build(sub, d.pop(key))
            if "objective" in d:
                obj = dict(d.pop("objective"))
                if "lambda" in obj:
                    obj["lam"] = obj.pop("lambda")
                kwargs["objective"] = _build(ObjectiveConfig, obj)
            known = {f.name for f in fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            kwargs.update(d)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


# -- compute accounting ----------------------------------------------------------------

def generation_units(T: int, context_offset: int = 0) -> int:
    """Cost of generating T tokens after ``context_offset`` extra context tokens."""
    return T * (context_offset + 1) + T * (T + 1) // 2


def compute_units(generations: Iterable[tuple[int, int]] = (), verifications: int = 0,
                  comparisons: int = 0) -> int:
    """Units for (length, context offset) generations plus verifier/comparison calls."""
    return sum(generation_units(T, c0) for T, c0 in generations) + verifications + comparisons


@dataclass
class CostLedger:
    base_generation: int = 0
    correction_generation: int = 0
    verification: int = 0
    comparison: int = 0

    @property
    def total(self) -> int:
        return self.base_generation + self.correction_generation + self.verification + self.comparison


@dataclass
class MetricsRow:
    iteration: int
    compute_units: int
    mean_reward: float
    mean_shaped_reward: float
    correction_success_rate: float
    rewrite_rate: float
    adv_centered_variance: float
    grad_norm: float

    def values(self) -> list:
        return [getattr(self, c) for c in METRICS_COLUMNS]


@dataclass
class TrainState:
    params: PolicyParams
    iteration: int = 0
    costs: CostLedger = field(default_factory=CostLedger)
    attempts: int = 0
    successes: int = 0


def init_state(config: RunConfig) -> TrainState:
    p = config.policy
    return TrainState(PolicyParams.init(config.env.V, p.skill_bias, p.target_copy_bias, p.ref_copy_bias))


@lru_cache(maxsize=65536)
def _task(seed: int, V: int, L: int) -> TaskInstance:
    return make_task(seed, V, L)


def _iteration_rngs(seed: int, iteration: int, n: int = 4):
    children = np.random.SeedSequence([seed, iteration]).spawn(n)
    return [np.random.default_rng(c) for c in children]


@dataclass
class _PromptWork:
    task: TaskInstance
    group: GroupBatch
    attempts: list[CorrectionAttempt] = field(default_factory=list)
    first_outputs: dict[int, Trajectory] = field(default_factory=dict)
    contexts: dict[int, CorrectionContext] = field(default_factory=dict)
    outcomes: list = field(default_factory=list)


def _correct_prompt(work: _PromptWork, config: RunConfig, behavior: PolicyParams,
                    rng: np.random.Generator, costs: CostLedger) -> None:
    """Reference draw and one correction for every incorrect member."""
    task, group = work.task, work.group
    incorrect = [i for i, t in enumerate(group.trajectories) if t.terminal_reward == 0]
    if not incorrect:
        return
    refs = []
    for i in incorrect:
        ref_idx = sample_reference(group, i, rng) if config.uses_reference else None
        refs.append(ref_idx)
        ref = None if ref_idx is None else group.trajectories[ref_idx]
        work.contexts[i] = CorrectionContext(task, group.trajectories[i], ref)
    ctxs = [work.contexts[i] for i in incorrect]
    if config.corrector.kind == "oracle":
        q = config.corrector.repair_prob
        outputs = [oracle_correct(task, ctx.target, q, rng) for ctx in ctxs]
    else:
        outputs = PolicyCorrector(behavior).sample_many(ctxs, rng)
    for i, ref_idx, ctx, z in zip(incorrect, refs, ctxs, outputs):
        costs.correction_generation += generation_units(len(z), _context_offset(ctx))
        costs.verification += 1
        costs.comparison += 1
        work.attempts.append(make_attempt(group, i, ref_idx, z))
        work.first_outputs[i] = z


def _context_offset(ctx: CorrectionContext) -> int:
    return len(ctx.target) + (0 if ctx.reference is None else len(ctx.reference))


def run_correction_aux(state: TrainState, contexts: dict[int, CorrectionContext],
                       config: RunConfig, rng: np.random.Generator,
                       first_outputs: dict[int, Trajectory] | None = None):
    """Auxiliary correction objective for one prompt; returns (J_corr, grad, costs).

    ``contexts`` maps each incorrect answer to its correction input. Each input
    forms its own group: ``z_1`` reuses the correction already generated for
    shaping (when given) and ``G_c - 1`` more outputs are sampled from the
    current, not yet updated, policy. Inputs without a reference are skipped.
    """
    cfg = config.objective_cfg
    costs = CostLedger()
    if not config.joint_training:
        return 0.0, SparseGradient.empty(config.env.V), costs
    first_outputs = first_outputs or {}
    keys = [i for i, ctx in contexts.items() if ctx.reference is not None]
    need = {i: cfg.correction_group_size - (1 if i in first_outputs else 0) for i in keys}
    flat_ctx = [contexts[i] for i in keys for _ in range(need[i])]
    fresh = PolicyCorrector(state.params).sample_many(flat_ctx, rng) if flat_ctx else []
    groups, k = [], 0
    for i in keys:
        outs = ([first_outputs[i]] if i in first_outputs else []) + fresh[k:k + need[i]]
        k += need[i]
        for z in outs[len(outs) - need[i]:]:
            costs.correction_generation += generation_units(len(z), _context_offset(contexts[i]))
            costs.verification += 1
        groups.append(CorrectionGroup(contexts[i], outs))
    J, g = correction_objective(groups, state.params, cfg)
    return J, g, costs


def run_iteration(state: TrainState, config: RunConfig):
    """One pass of the main procedure; returns (state, MetricsRow, log records)."""
    cfg = config.objective_cfg
    env = config.env
    rng_tasks, rng_roll, rng_corr, rng_aux = _iteration_rngs(config.seed, state.iteration)
    behavior = state.params.copy()  # frozen old policy for this iteration
    seeds = env.task_seed_start + rng_tasks.integers(env.n_tasks, size=config.batch_size)

    work: list[_PromptWork] = []
    for s in seeds:
        task = _task(int(s), env.V, env.L)
        tokens, logps = sample_tokens(behavior, task, Mode.BASE, config.G, rng_roll,
                                      max_len=config.policy.max_len)
        trajs = [Trajectory(tk, lp, verify(task, tk)) for tk, lp in zip(tokens, logps)]
        state.costs.base_generation += config.G * generation_units(task.solution_length)
        state.costs.verification += config.G
        work.append(_PromptWork(task, GroupBatch(task.task_id, trajs)))

    if config.uses_corrections:
        for w in work:
            _correct_prompt(w, config, behavior, rng_corr, state.costs)

    all_attempts = [a for w in work for a in w.attempts]
    alpha = config.alpha
    if config.alpha_mode == "adaptive" and all_attempts:
        alpha = adaptive_threshold([a.d_target for a in all_attempts])

    n_success = n_rewrite = 0
    J_batch = 0.0
    grad = SparseGradient.empty(env.V)
    shaped_all, raw_all, var_terms = [], [], []
    for w in work:
        outcomes = [NO_COMPARISON] * w.group.size
        for a in w.attempts:
            o = score_attempt(w.group, a, _COMPARE_VARIANT.get(cfg.variant, Variant.BASE),
                              alpha, cfg.rho, config.rewrite_penalty)
            outcomes[a.target_index] = o
            n_rewrite += o.rewrite
            n_success += (o.corrected_reward == 1 and not o.rewrite)
        w.outcomes = outcomes
        r = w.group.rewards
        r_shaped = np.array([shaped_reward(ri, o.delta, cfg.lam) for ri, o in zip(r, outcomes)])
        w.group.shaped_rewards = list(r_shaped)
        w.group.advantages = list(group_advantages(r_shaped, cfg.std_floor))
        shaped_all.extend(r_shaped)
        raw_all.extend(r)
        var_terms.append(float(np.var(r_shaped)))

        J_x, g_x = main_objective(w.task, w.group, outcomes, state.params, cfg)
        J_corr, g_corr = 0.0, SparseGradient.empty(env.V)
        if config.joint_training and w.contexts:
            J_corr, g_corr, aux_costs = run_correction_aux(state, w.contexts, config, rng_aux, w.first_outputs)
            state.costs.correction_generation += aux_costs.correction_generation
            state.costs.verification += aux_costs.verification
        J_tot, g_tot = total_objective(J_x, g_x, J_corr, g_corr, cfg.eta)
        J_batch += J_tot
        grad = grad + g_tot

    gnorm = grad.norm()
    if not (math.isfinite(J_batch) and math.isfinite(gnorm)):
        raise TrainingAborted(f"non-finite objective at iteration {state.iteration}")
    apply_update(state.params, grad, config.policy.lr)

    n_att = len(all_attempts)
    state.attempts += n_att
    state.successes += n_success
    row = MetricsRow(
        iteration=state.iteration,
        compute_units=state.costs.total,
        mean_reward=float(np.mean(raw_all)),
        mean_shaped_reward=float(np.mean(shaped_all)),
        correction_success_rate=n_success / n_att if n_att else 0.0,
        rewrite_rate=n_rewrite / n_att if n_att else 0.0,
        adv_centered_variance=float(np.mean(var_terms)),
        grad_norm=gnorm,
    )
    records = []
    if config.trajectory_log_every and state.iteration % config.trajectory_log_every == 0:
        for w in work:
            for t, o in zip(w.group.trajectories, w.outcomes):
                records.append(trajectory_record(w.task.task_id, t, iteration=state.iteration, **o.log_fields()))
    state.iteration += 1
    return state, row, records


# -- evaluation ----------------------------------------------------------------------------

def evaluate(params: PolicyParams, config: RunConfig, n_tasks: int | None = None, seed: int | None = None) -> float:
    """Held-out accuracy under the method's inference procedure.

    BEST_OF_N keeps the first verifier-passing of N samples (else the first);
    PROMPT_ONLY answers with one policy correction pass over two samples;
    every other method answers with a single sample.
    """
    env = config.env
    n_tasks = env.n_eval if n_tasks is None else n_tasks
    rng = np.random.default_rng([config.seed if seed is None else seed, 7919])
    hits = 0
    for k in range(n_tasks):
        task = _task(env.eval_seed_start + k, env.V, env.L)
        if config.method == Method.BEST_OF_N:
            tokens, _ = sample_tokens(params, task, Mode.BASE, config.best_of_n, rng)
            rewards = [verify(task, t) for t in tokens]
            hits += rewards[rewards.index(1)] if 1 in rewards else rewards[0]
        elif config.method == Method.PROMPT_ONLY:
            tokens, logps = sample_tokens(params, task, Mode.BASE, 2, rng)
            y, ref = (Trajectory(tk, lp, verify(task, tk)) for tk, lp in zip(tokens, logps))
            z = PolicyCorrector(params).sample_many([CorrectionContext(task, y, ref)], rng)[0]
            hits += z.terminal_reward
        else:
            tokens, _ = sample_tokens(params, task, Mode.BASE, 1, rng)
            hits += verify(task, tokens[0])
    return hits / n_tasks if n_tasks else 0.0


# -- driver ---------------------------------------------------------------------------------

def units_to_threshold(rows: Sequence[dict | MetricsRow], threshold: float, window: int = 5) -> float | None:
    """Compute units at the first iteration whose trailing ``window``-mean reward reaches ``threshold``."""
    rewards, units = [], []
    for r in rows:
        get = r.get if isinstance(r, dict) else (lambda k, r=r: getattr(r, k))
        rewards.append(float(get("mean_reward")))
        units.append(float(get("compute_units")))
    for k in range(len(rewards)):
        lo = max(0, k - window + 1)
        if np.mean(rewards[lo:k + 1]) >= threshold:
            return units[k]
    return None


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(config: RunConfig, out_dir: str | Path) -> Path:
    """Run until the iteration cap or the compute budget; returns the metrics path.

    An iteration that starts under budget always completes and is charged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    # stream into .partial files and rename on completion
    partial_metrics = out / "metrics.csv.partial"
    traj_final = out / "trajectories.jsonl"
    traj_path = out / "trajectories.jsonl.partial"
    traj_path.write_text("")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    state = init_state(config)
    recent: list[float] = []
    with open(partial_metrics, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        fh.flush()
        while state.iteration < config.iterations:
            if config.compute_budget is not None and state.costs.total >= config.compute_budget:
                break
            state, row, records = run_iteration(state, config)
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
            fh.flush()
            if records:
                write_jsonl(traj_path, records, append=True)
            recent = (recent + [row.mean_reward])[-config.threshold_window:]
            if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                ckpt = out / "checkpoints"
                ckpt.mkdir(exist_ok=True)
                save_params(state.params, ckpt / f"iter_{state.iteration:05d}.txt")
            if config.stop_reward is not None and np.mean(recent) >= config.stop_reward:
                break
    os.replace(partial_metrics, metrics_path)
    os.replace(traj_path, traj_final)
    save_params(state.params, out / "policy_final.txt")
    summary = {
        "method": config.method.value,
        "iterations": state.iteration,
        "compute_units": state.costs.total,
        "costs": dataclasses.asdict(state.costs),
        "eval_reward": evaluate(state.params, config),
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2))
    log.info("finished %s: %d iterations, %d units", config.method.value, state.iteration, state.costs.total)
    return metrics_path
