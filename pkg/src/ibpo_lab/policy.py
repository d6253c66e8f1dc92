"""Context-indexed softmax policy with exact sampling and analytic score functions.

The parameter table has ``6V + 1`` rows of ``V`` logits:

* ``4V`` base rows, one per (operation code, previous token). Operation code 3
  marks the answer position.
* ``V`` target rows, one per token of the answer being repaired.
* ``V + 1`` reference rows, one per reference token plus one for "no reference".

A BASE context reads its base row. A CORRECTION context reads the sum of the
base row, the target row and the reference row for the current position, so
the corrector shares the base policy's arithmetic and adds copy preferences on
top. Every logit vector is therefore a sum of table rows and the score function
of a sampled token is ``onehot(y) - p`` on each row that was read.

Checkpoint format (text)::

    # ibpo-policy V=<V> rows=<n_rows>
    <row index> <logit_0> ... <logit_{V-1}>

one line per row, floats written with 17 significant digits.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core_types import Trajectory
from .env_chain import CorrectionContext, Op, TaskInstance, apply_op, verify

N_OP_CODES = 4
ANSWER_CODE = 3


class Mode(str, Enum):
    BASE = "base"
    CORRECTION = "correction"


def n_rows(V: int) -> int:
    return 6 * V + 1


def _target_row(V, tok):
    return 4 * V + tok


def _ref_row(V, tok):
    # tok == V encodes an absent reference
    return 5 * V + tok


@dataclass
class PolicyParams:
    logits: np.ndarray
    V: int

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.shape != (n_rows(self.V), self.V):
            raise ValueError(f"logit table shape {self.logits.shape} != {(n_rows(self.V), self.V)}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("policy logits must be finite")

    @classmethod
    def init(cls, V: int, skill_bias: float = 0.0, target_copy_bias: float = 0.0,
             ref_copy_bias: float = 0.0) -> "PolicyParams":
        """Initial table standing in for a pretrained model.

        ``skill_bias`` adds a logit bonus to the correct continuation of every
        base row (the operation's result, or the previous value at the answer
        position); the copy biases give the corrector diagonal preferences for
        the target's and the reference's token.
        """
        table = np.zeros((n_rows(V), V))
        if skill_bias:
            for code in range(N_OP_CODES):
                for prev in range(V):
                    nxt = prev if code == ANSWER_CODE else apply_op(Op(code), prev, V)
                    table[code * V + prev, nxt] = skill_bias
        eye = np.eye(V)
        table[4 * V:5 * V] = target_copy_bias * eye
        table[5 * V:6 * V] = ref_copy_bias * eye
        return cls(table, V)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy(), self.V)


class SparseGradient:
    """Row-sparse gradient over the logit table; at most one value per (row, token)."""

    def __init__(self, rows=(), values=None, V: int | None = None):
        rows = np.asarray(rows, dtype=int)
        if values is None:
            values = np.zeros((0, V or 0))
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != rows.shape[0]:
            raise ValueError("values must be (len(rows), V)")
        if len(np.unique(rows)) != len(rows):
            raise ValueError("duplicate rows; accumulate before constructing")
        order = np.argsort(rows)
        self.rows = rows[order]
        self.values = values[order]

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseGradient":
        nz = np.flatnonzero(np.any(dense != 0.0, axis=1))
        return cls(nz, dense[nz], V=dense.shape[1])

    @classmethod
    def empty(cls, V: int) -> "SparseGradient":
        return cls([], np.zeros((0, V)), V=V)

    @classmethod
    def from_entries(cls, entries, V: int) -> "SparseGradient":
        acc: dict[int, np.ndarray] = {}
        for row, tok, val in entries:
            acc.setdefault(int(row), np.zeros(V))[int(tok)] += float(val)
        rows = sorted(acc)
        return cls(rows, np.array([acc[r] for r in rows]).reshape(len(rows), V), V=V)

    @property
    def V(self) -> int:
        return self.values.shape[1]

    def to_dense(self, n: int) -> np.ndarray:
        out = np.zeros((n, self.V))
        out[self.rows] = self.values
        return out

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for r, vec in zip(self.rows, self.values):
            for k, v in enumerate(vec):
                if v != 0.0:
                    yield int(r), k, float(v)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2)))

    def scale(self, c: float) -> "SparseGradient":
        return SparseGradient(self.rows, self.values * c, V=self.V)

    def __add__(self, other: "SparseGradient") -> "SparseGradient":
        if len(self.rows) == 0:
            return other
        if len(other.rows) == 0:
            return self
        rows = np.union1d(self.rows, other.rows)
        vals = np.zeros((len(rows), max(self.V, other.V)))
        vals[np.searchsorted(rows, self.rows)] += self.values
        vals[np.searchsorted(rows, other.rows)] += other.values
        return SparseGradient(rows, vals, V=vals.shape[1])

    def __neg__(self) -> "SparseGradient":
        return self.scale(-1.0)

    def __len__(self) -> int:
        return len(self.rows)


# -- contexts -------------------------------------------------------------------

def _op_code(task: TaskInstance, position: int) -> int:
    return int(task.ops[position]) if position < task.chain_length else ANSWER_CODE


def context_index(task: TaskInstance, mode: Mode, prev_token: int, position: int,
                  target_token: int | None = None, ref_token: int | None = None) -> int:
    """Injective integer key for a decoding context.

    BASE keys live in ``[0, 4V)``; CORRECTION keys follow and additionally
    encode the target token and the reference token (``V`` when absent).
    """
    if position < 0:
        raise ValueError("position must be >= 0")
    V = task.modulus
    base = _op_code(task, position) * V + int(prev_token)
    if Mode(mode) == Mode.BASE:
        return base
    if target_token is None:
        raise ValueError("CORRECTION contexts need the target token")
    ref = V if ref_token is None else int(ref_token)
    return 4 * V + (base * V + int(target_token)) * (V + 1) + ref


def context_rows(key: int, V: int) -> tuple[int, ...]:
    """Table rows whose sum gives the logits of the context with this key."""
    if key < 4 * V:
        return (key,)
    k = key - 4 * V
    ref = k % (V + 1)
    k //= V + 1
    tgt = k % V
    base = k // V
    return (base, _target_row(V, tgt), _ref_row(V, ref))


def _step_rows(task, mode, position, prev, tgt, ref):
    """Row indices, shape (n, R), for one decoding step of n parallel samples."""
    V = task.modulus
    base = _op_code(task, position) * V + prev
    if mode == Mode.BASE:
        return base[:, None]
    return np.stack([base, _target_row(V, tgt), _ref_row(V, ref)], axis=1)


def _correction_arrays(ctx: CorrectionContext, T: int):
    V = ctx.task.modulus
    tgt = np.zeros(T, dtype=int)
    ref = np.full(T, V, dtype=int)
    n = min(T, len(ctx.target))
    tgt[:n] = ctx.target.tokens[:n]
    if ctx.reference is not None:
        m = min(T, len(ctx.reference))
        ref[:m] = ctx.reference.tokens[:m]
    return tgt, ref


def trajectory_rows(task: TaskInstance, mode: Mode, tokens: np.ndarray,
                    corr_ctx: CorrectionContext | Sequence[CorrectionContext] | None = None) -> np.ndarray:
    """Rows read at every step of ``tokens`` (n, T), returned as (n, T, R)."""
    mode = Mode(mode)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=int))
    n, T = tokens.shape
    prev = np.concatenate([np.full((n, 1), task.start_value), tokens[:, :-1]], axis=1)
    tgt = ref = None
    if mode == Mode.CORRECTION:
        ctxs = [corr_ctx] * n if isinstance(corr_ctx, CorrectionContext) else list(corr_ctx)
        pairs = [_correction_arrays(c, T) for c in ctxs]
        tgt = np.array([p[0] for p in pairs])
        ref = np.array([p[1] for p in pairs])
    cols = []
    for t in range(T):
        cols.append(_step_rows(task, mode, t, prev[:, t],
                               None if tgt is None else tgt[:, t],
                               None if ref is None else ref[:, t]))
    return np.stack(cols, axis=1)


# -- probabilities ---------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def step_logits(params: PolicyParams, rows: np.ndarray) -> np.ndarray:
    return params.logits[rows].sum(axis=-2)


def token_logprobs(params: PolicyParams, rows: np.ndarray, tokens: np.ndarray):
    """Per-token log pi and full probabilities for tokens (n, T) read at rows (n, T, R)."""
    logp_all = _log_softmax(step_logits(params, rows))
    lp = np.take_along_axis(logp_all, tokens[..., None], axis=-1)[..., 0]
    return lp, np.exp(logp_all)


def accumulate_score(params: PolicyParams, rows: np.ndarray, tokens: np.ndarray,
                     probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Dense sum over steps of ``weight * d log pi(y|c) / d logits``."""
    V = params.V
    g = -weights[..., None] * probs
    flat_tokens = tokens.reshape(-1)
    g = g.reshape(-1, V)
    g[np.arange(len(flat_tokens)), flat_tokens] += weights.reshape(-1)
    dense = np.zeros_like(params.logits)
    R = rows.shape[-1]
    flat_rows = rows.reshape(-1, R)
    for r in range(R):
        np.add.at(dense, flat_rows[:, r], g)
    return dense


# -- public operations ------------------------------------------------------------

def sample_tokens(params: PolicyParams, task: TaskInstance, mode: Mode, n: int,
                  rng: np.random.Generator,
                  corr_ctxs: Sequence[CorrectionContext] | None = None,
                  max_len: int | None = None):
    """Draw n solutions in lockstep; returns (tokens (n, T), logprobs (n, T))."""
    mode = Mode(mode)
    T = task.solution_length
    if max_len is not None and max_len < T:
        raise ValueError(f"max_len {max_len} shorter than the solution length {T}")
    if (mode == Mode.CORRECTION) != (corr_ctxs is not None):
        raise ValueError("corr_ctxs must be given exactly in CORRECTION mode")
    tgt = ref = None
    if corr_ctxs is not None:
        if len(corr_ctxs) != n:
            raise ValueError("need one correction context per sample")
        pairs = [_correction_arrays(c, T) for c in corr_ctxs]
        tgt = np.array([p[0] for p in pairs])
        ref = np.array([p[1] for p in pairs])
    tokens = np.zeros((n, T), dtype=int)
    logps = np.zeros((n, T))
    prev = np.full(n, task.start_value, dtype=int)
    u = rng.random((n, T))
    for t in range(T):
        rows = _step_rows(task, mode, t, prev,
                          None if tgt is None else tgt[:, t],
                          None if ref is None else ref[:, t])
        logp_all = _log_softmax(params.logits[rows].sum(axis=1))
        cdf = np.cumsum(np.exp(logp_all), axis=1)
        y = np.minimum((u[:, t, None] >= cdf).sum(axis=1), task.modulus - 1)
        tokens[:, t] = y
        logps[:, t] = logp_all[np.arange(n), y]
        prev = y
    return tokens, logps


def sample_trajectory(params: PolicyParams, task: TaskInstance, mode: Mode,
                      corr_ctx: CorrectionContext | None, rng: np.random.Generator,
                      max_len: int | None = None) -> Trajectory:
    ctxs = None if corr_ctx is None else [corr_ctx]
    tokens, logps = sample_tokens(params, task, mode, 1, rng, ctxs, max_len)
    return Trajectory(tokens[0], logps[0], verify(task, tokens[0]))


def log_prob(params: PolicyParams, task: TaskInstance, mode: Mode,
             corr_ctx: CorrectionContext | None, tokens: Sequence[int]):
    """Return (total, per_token) log-probability of ``tokens``."""
    toks = np.asarray(tokens, dtype=int)[None, :]
    rows = trajectory_rows(task, mode, toks, corr_ctx)
    lp, _ = token_logprobs(params, rows, toks)
    per_token = [float(x) for x in lp[0]]
    return float(sum(per_token)), per_token


def grad_log_prob(params: PolicyParams, task: TaskInstance, mode: Mode,
                  corr_ctx: CorrectionContext | None, tokens: Sequence[int]) -> SparseGradient:
    toks = np.asarray(tokens, dtype=int)[None, :]
    rows = trajectory_rows(task, mode, toks, corr_ctx)
    _, probs = token_logprobs(params, rows, toks)
    dense = accumulate_score(params, rows, toks, probs, np.ones(toks.shape))
    return SparseGradient.from_dense(dense)


def apply_update(params: PolicyParams, grad: SparseGradient, lr: float) -> PolicyParams:
    """Gradient ascent step, in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not np.all(np.isfinite(grad.values)):
        raise ValueError("non-finite gradient values")
    if len(grad):
        params.logits[grad.rows] += lr * grad.values
    return params


def save_params(params: PolicyParams, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# ibpo-policy V={params.V} rows={params.logits.shape[0]}\n")
        for i, row in enumerate(params.logits):
            fh.write(f"{i} " + " ".join(f"{x:.17g}" for x in row) + "\n")


def load_params(path: str | Path) -> PolicyParams:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["#", "ibpo-policy"]:
            raise ValueError(f"{path}: not a policy checkpoint")
        meta = dict(kv.split("=") for kv in header[2:])
        V, nr = int(meta["V"]), int(meta["rows"])
        table = np.zeros((nr, V))
        for line in fh:
            parts = line.split()
            if parts:
                table[int(parts[0])] = [float(x) for x in parts[1:]]
    return PolicyParams(table, V)
