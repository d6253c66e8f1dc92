"""
The chain task and the tabular policy
=====================================

A task is a start value and a short chain of modular operations. The answer
is the sequence of intermediate values; only the final token decides reward.
"""
# %%
import numpy as np

from ibpo_lab.env_chain import make_task, oracle_correct, oracle_solution, verify
from ibpo_lab.core_types import Trajectory
from ibpo_lab.policy import Mode, PolicyParams, log_prob, sample_tokens

task = make_task(seed=3, V=16, L=4)
print("start", task.start_value, "ops", [op.name for op in task.ops])
print("oracle answer", oracle_solution(task), "-> reward", verify(task, oracle_solution(task)))

# %%
# The skill prior tilts each step toward applying the right operation to the
# previous token. Errors compound over the chain, so at the training default
# (1.75) most groups are still entirely wrong.
rng = np.random.default_rng(0)
for bias in (0.0, 1.75, 4.0):
    params = PolicyParams.init(16, skill_bias=bias)
    tokens, _ = sample_tokens(params, task, Mode.BASE, 2000, rng)
    acc = np.mean([verify(task, t) for t in tokens])
    print(f"skill bias {bias:4.2f}: accuracy {acc:.3f}")

# %%
# Log-probabilities are per token; under uniform logits each is log(1/16).
_, per_token = log_prob(PolicyParams.init(16), task, Mode.BASE, None, oracle_solution(task))
print("per-token log-prob", np.round(per_token, 7))

# %%
# The oracle corrector splices the right suffix in at the first divergence.
wrong = Trajectory(tokens[0], [0.0] * task.solution_length)
fixed = oracle_correct(task, wrong.with_reward(verify(task, wrong.tokens)), q=1.0, rng=rng)
print("sampled", wrong.tokens, "-> corrected", fixed.tokens, "reward", fixed.terminal_reward)
