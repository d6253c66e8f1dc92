"""
Compare and correct
===================

For an incorrect answer we draw a reference from the group, ask a corrector
for a fix and turn the outcome into a shaping signal. Corrections that just
copy the reference are caught by the rewrite filter.
"""
# %%
import numpy as np

from ibpo_lab.core_types import GroupBatch, Trajectory
from ibpo_lab.counterfactual import (
    OracleCorrector,
    Variant,
    adaptive_threshold,
    compare,
    detect_rewrite,
    edit_distance,
    token_mask,
)
from ibpo_lab.env_chain import Op, TaskInstance

# %%
al = edit_distance([1, 2, 3], [1, 5, 3])
print("distance", al.distance, "normalized", round(al.normalized, 4), "matched", al.matched_pairs)
print("mask over the original", token_mask([1, 2, 3], [1, 5, 3]))

# %%
# Rewrite: far from the original and closer to the reference.
y = [1, 2, 3, 4, 5]
print("copy of reference ->", detect_rewrite(y, [6, 7, 8, 9, 5], [6, 7, 8, 9, 0], alpha=0.6))
print("local edit        ->", detect_rewrite(y, [1, 2, 3, 4, 9], [0, 0, 0, 0, 0], alpha=0.6))
print("adaptive alpha for [0.1, 0.2, 0.3]:", round(adaptive_threshold([0.1, 0.2, 0.3]), 7))

# %%
# One comparison per variant on start=3, ops [INC1, DBL, INC2].
task = TaskInstance(3, (Op.INC1, Op.DBL, Op.INC2), 16)
group = GroupBatch(3, [Trajectory([4, 9, 10, 11], [0.0] * 4, 0), Trajectory([4, 8, 10, 10], [0.0] * 4, 1)])
rng = np.random.default_rng(0)
for variant in Variant:
    out = compare(group, task, 0, variant, OracleCorrector(1.0), rng)
    print(f"{variant.value:5s} s={out.s:.2f} delta={out.delta:.2f} mask={out.mask} rewrite={out.rewrite}")


# %%
class CopyReference:
    def __call__(self, ctx, n, rng):
        return [ctx.reference] * n


out = compare(GroupBatch(3, [Trajectory([0, 1, 2, 3], [0.0] * 4, 0), group.trajectories[1]]),
              task, 0, Variant.BASE, CopyReference(), rng)
print("copied reference: rewrite", out.rewrite, "corrected reward", out.corrected_reward, "delta", out.delta)
