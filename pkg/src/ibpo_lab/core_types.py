"""Shared value types, reward recoding and structural validation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

TokenMask = tuple[int, ...]


class TrajectoryError(ValueError):
    """A trajectory violates one of its structural invariants."""


@dataclass(frozen=True)
class Trajectory:
    """A generated token sequence with behavior-policy log-probs and a 0/1 reward."""

    tokens: tuple[int, ...]
    logprobs_old: tuple[float, ...]
    terminal_reward: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "logprobs_old", tuple(float(x) for x in self.logprobs_old))

    def __len__(self) -> int:
        return len(self.tokens)

    def with_reward(self, r: int) -> "Trajectory":
        return Trajectory(self.tokens, self.logprobs_old, int(r))


@dataclass
class GroupBatch:
    """G trajectories sampled for one task, plus the per-member training signals."""

    task_id: int
    trajectories: list[Trajectory]
    shaped_rewards: list[float] | None = None
    advantages: list[float] | None = None

    def __post_init__(self):
        if len(self.trajectories) < 1:
            raise ValueError("a group needs at least one trajectory")
        for name in ("shaped_rewards", "advantages"):
            val = getattr(self, name)
            if val is not None and len(val) != len(self.trajectories):
                raise ValueError(f"{name} has length {len(val)}, expected {len(self.trajectories)}")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.terminal_reward for t in self.trajectories], dtype=float)


def to_signed_reward(r) -> int:
    """Map a correctness indicator r in {0, 1} to Y = 2r - 1 in {-1, 1}."""
    if isinstance(r, (bool, np.bool_)) or r not in (0, 1):
        raise ValueError(f"reward must be 0 or 1, got {r!r}")
    return 2 * int(r) - 1


def validate_trajectory(t: Trajectory, V: int) -> None:
    """Raise TrajectoryError naming the first violated invariant; return None if ok."""
    if len(t.tokens) < 1:
        raise TrajectoryError("trajectory is empty")
    if len(t.tokens) != len(t.logprobs_old):
        raise TrajectoryError(
            f"length mismatch: {len(t.tokens)} tokens vs {len(t.logprobs_old)} logprobs"
        )
    for i, tok in enumerate(t.tokens):
        if not 0 <= tok < V:
            raise TrajectoryError(f"token {tok} at index {i} outside [0, {V})")
    for i, lp in enumerate(t.logprobs_old):
        if not math.isfinite(lp) or lp > 0.0:
            raise TrajectoryError(f"logprob {lp} at index {i} is not a finite value <= 0")
    if t.terminal_reward not in (0, 1):
        raise TrajectoryError(f"terminal reward {t.terminal_reward} not in {{0, 1}}")


def validate_mask(mask: Sequence[int], t: Trajectory) -> None:
    if len(mask) != len(t.tokens):
        raise TrajectoryError(f"mask length {len(mask)} != trajectory length {len(t.tokens)}")
    for i, b in enumerate(mask):
        if b not in (0, 1):
            raise TrajectoryError(f"mask bit {b} at index {i} not in {{0, 1}}")


# -- JSONL trajectory records -------------------------------------------------

def trajectory_record(task_id: int, t: Trajectory, **extra) -> dict:
    rec = {
        "task_id": int(task_id),
        "tokens": list(t.tokens),
        "logprobs": list(t.logprobs_old),
        "reward": int(t.terminal_reward),
    }
    rec.update(extra)
    return rec


def record_to_trajectory(rec: dict) -> tuple[int, Trajectory]:
    t = Trajectory(rec["tokens"], rec["logprobs"], rec["reward"])
    return int(rec["task_id"]), t


def write_jsonl(path: str | Path, records: Iterable[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
