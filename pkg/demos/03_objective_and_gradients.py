"""
Shaped rewards, ratios and the clipped objective
================================================

Shaping adds lambda * delta to the raw 0/1 reward before group
normalization. The sequence ratio is a geometric mean over tokens and the
mask variant restricts it to tokens the correction changed.
"""
# %%
import numpy as np

from ibpo_lab.core_types import GroupBatch, Trajectory
from ibpo_lab.counterfactual import ComparisonOutcome
from ibpo_lab.env_chain import make_task, verify
from ibpo_lab.objective import (
    ObjectiveConfig,
    clipped_surrogate,
    group_advantages,
    gspo_ratio,
    main_objective,
    masked_ratio,
    shaped_reward,
)
from ibpo_lab.policy import Mode, PolicyParams, n_rows, sample_tokens

print("shaped reward r=0, delta=0.5, lambda=0.6:", shaped_reward(0, 0.5, 0.6))
print("advantages [1,0,0,0]:", np.round(group_advantages([1, 0, 0, 0]), 7))
print("advantages [1,0.3,0,0]:", np.round(group_advantages([1, 0.3, 0, 0]), 4))

# %%
print("ratio, one token +ln4 over T=2:", gspo_ratio([np.log(4), 0.0], [0.0, 0.0]))
print("masked ratio [1,0] over [ln3, ln100]:", masked_ratio([np.log(3), np.log(100)], [0, 0], [1, 0]))
print("clip(1.5, A=1):", clipped_surrogate(1.5, 1.0, 0.2), " clip(0.5, A=-1):", clipped_surrogate(0.5, -1.0, 0.2))

# %%
# Analytic gradient against central differences on a small instance.
rng = np.random.default_rng(0)
V = 8
task = make_task(0, V, 2)
old = PolicyParams(rng.normal(size=(n_rows(V), V)), V)
tokens, logps = sample_tokens(old, task, Mode.BASE, 4, rng)
adv = rng.normal(size=4)
group = GroupBatch(0, [Trajectory(t, lp, verify(task, t)) for t, lp in zip(tokens, logps)],
                   advantages=list(adv - adv.mean()))
comps = [ComparisonOutcome(1.0, 0.5, (1, 0, 1), False, None, 1)] * 4
cfg = ObjectiveConfig(variant="IBPO_MASK")
params = PolicyParams(old.logits + rng.normal(scale=0.1, size=old.logits.shape), V)
_, grad = main_objective(task, group, comps, params, cfg)

h, fd = 1e-5, np.zeros_like(params.logits)
for idx in np.ndindex(fd.shape):
    up, dn = params.copy(), params.copy()
    up.logits[idx] += h
    dn.logits[idx] -= h
    fd[idx] = (main_objective(task, group, comps, up, cfg)[0] - main_objective(task, group, comps, dn, cfg)[0]) / (2 * h)
dense = grad.to_dense(n_rows(V))
print("touched rows", len(grad.rows), "max rel err", np.max(np.abs(dense - fd)) / np.max(np.abs(fd)))
