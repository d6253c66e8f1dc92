"""Arithmetic-chain environment with an exact verifier and an oracle corrector.

A task is a start value and a chain of modular operations. A solution writes
every intermediate value and then repeats the last one as the answer token::

    start=3, ops=[INC1, DBL, INC2], V=16  ->  [4, 8, 10, 10]

Only the final token is checked, so a single wrong intermediate value usually
propagates (DBL doubles the error) into a wrong answer.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .core_types import Trajectory


class Op(IntEnum):
    INC1 = 0
    INC2 = 1
    DBL = 2


def apply_op(op: Op, v: int, V: int) -> int:
    if op == Op.INC1:
        return (v + 1) % V
    if op == Op.INC2:
        return (v + 2) % V
    if op == Op.DBL:
        return (2 * v) % V
    raise ValueError(f"unknown op {op!r}")


@dataclass(frozen=True)
class TaskInstance:
    start_value: int
    ops: tuple[Op, ...]
    modulus: int
    task_id: int = 0

    def __post_init__(self):
        if self.modulus < 4:
            raise ValueError("modulus V must be >= 4")
        if len(self.ops) < 1:
            raise ValueError("chain length L must be >= 1")
        if not 0 <= self.start_value < self.modulus:
            raise ValueError("start_value outside [0, V)")
        object.__setattr__(self, "ops", tuple(Op(o) for o in self.ops))

    @property
    def chain_length(self) -> int:
        return len(self.ops)

    @property
    def solution_length(self) -> int:
        return len(self.ops) + 1


@dataclass(frozen=True)
class CorrectionContext:
    """Correction input: the task, the answer to repair and an optional reference."""

    task: TaskInstance
    target: Trajectory
    reference: Trajectory | None = None


def make_task(seed: int, V: int = 16, L: int = 4) -> TaskInstance:
    if V < 4:
        raise ValueError(f"V must be >= 4, got {V}")
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    rng = np.random.default_rng([int(seed), V, L])
    start = int(rng.integers(V))
    ops = tuple(Op(int(o)) for o in rng.integers(len(Op), size=L))
    return TaskInstance(start, ops, V, task_id=int(seed))


def oracle_solution(task: TaskInstance) -> list[int]:
    v = task.start_value
    out = []
    for op in task.ops:
        v = apply_op(op, v, task.modulus)
        out.append(v)
    out.append(v)
    return out


def _tokens(t: Trajectory | Sequence[int]) -> tuple[int, ...]:
    return t.tokens if isinstance(t, Trajectory) else tuple(int(x) for x in t)


def verify(task: TaskInstance, t: Trajectory | Sequence[int]) -> int:
    """1 iff the final token equals the chain's final value."""
    toks = _tokens(t)
    if len(toks) < 1:
        return 0
    v = task.start_value
    for op in task.ops:
        v = apply_op(op, v, task.modulus)
    return int(toks[-1] == v)


def first_divergence(task: TaskInstance, t: Trajectory | Sequence[int]) -> int | None:
    toks = _tokens(t)
    ref = oracle_solution(task)
    n = min(len(toks), len(ref))
    for i in range(n):
        if toks[i] != ref[i]:
            return i
    if len(toks) != len(ref):
        return n
    return None


def oracle_correct(task: TaskInstance, t: Trajectory, q: float, rng: np.random.Generator) -> Trajectory:
    """Repair ``t`` with probability ``q``; otherwise perturb one more token.

    A repair keeps the prefix before the first divergence and splices in the
    oracle continuation. The output's logprobs are zero placeholders: it is
    only ever scored, never differentiated.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"repair probability must lie in [0, 1], got {q}")
    repair = rng.random() < q
    toks = list(t.tokens)
    div = first_divergence(task, toks)
    if repair:
        if div is not None:
            toks = toks[:div] + oracle_solution(task)[div:]
    else:
        pos = int(rng.integers(len(toks)))
        shift = int(rng.integers(1, task.modulus))
        toks[pos] = (toks[pos] + shift) % task.modulus
    return Trajectory(toks, [0.0] * len(toks), verify(task, toks))
