import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibpo_lab.core_types import GroupBatch, Trajectory
from ibpo_lab.counterfactual import ComparisonOutcome
from ibpo_lab.env_chain import CorrectionContext, make_task, verify
from ibpo_lab.objective import (
    CorrectionGroup,
    ObjectiveConfig,
    ObjectiveVariant,
    clipped_surrogate,
    correction_objective,
    group_advantages,
    gspo_ratio,
    main_objective,
    masked_ratio,
    shaped_reward,
    total_objective,
)
from ibpo_lab.policy import Mode, PolicyParams, SparseGradient, n_rows, sample_tokens

LN2, LN3, LN4 = np.log(2), np.log(3), np.log(4)


def _sampled_group(params, task, G, rng):
    tokens, logps = sample_tokens(params, task, Mode.BASE, G, rng)
    trajs = [Trajectory(t, lp, verify(task, t)) for t, lp in zip(tokens, logps)]
    adv = rng.normal(size=G)
    return GroupBatch(0, trajs, advantages=list(adv - adv.mean()))


def _fd(fn, params, h=1e-6):
    grad = np.zeros_like(params.logits)
    for idx in np.ndindex(params.logits.shape):
        up, dn = params.copy(), params.copy()
        up.logits[idx] += h
        dn.logits[idx] -= h
        grad[idx] = (fn(up) - fn(dn)) / (2 * h)
    return grad


def _rel_err(analytic, fd):
    return np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12)


def _comparison(mask):
    return ComparisonOutcome(1.0, 0.5, tuple(mask), False, None, 1)


class TestShapedReward:
    def test_examples(self):
        assert shaped_reward(0, 0.5, 0.6) == pytest.approx(0.3)
        assert shaped_reward(1, 0.0, 0.6) == 1.0
        assert shaped_reward(0, 0.0, 0.6) == 0.0

    def test_rejects_unit_shaping(self):
        with pytest.raises(ValueError):
            shaped_reward(0, 0.5, 2.0)


class TestGroupAdvantages:
    def test_example(self):
        np.testing.assert_allclose(group_advantages([1, 0, 0, 0]),
                                   [1.7320507, -0.5773502, -0.5773502, -0.5773502], atol=1e-6)

    def test_degenerate(self):
        np.testing.assert_array_equal(group_advantages([1, 1, 1]), [0, 0, 0])

    def test_singleton(self):
        np.testing.assert_array_equal(group_advantages([0.3]), [0.0])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(0.5, 10), b=st.floats(-5, 5))
    def test_affine_invariance(self, seed, a, b):
        x = np.random.default_rng(seed).random(6) + np.arange(6)  # sigma well above the floor
        np.testing.assert_allclose(group_advantages(a * x + b), group_advantages(x), atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(x=st.lists(st.floats(0, 1.3), min_size=2, max_size=16))
    def test_centered_and_order_preserving(self, x):
        A = group_advantages(x)
        assert abs(A.mean()) < 1e-9
        xs = np.asarray(x)
        if np.ptp(xs) > 1e-6:
            assert np.argmax(A) == np.argmax(xs)
            # order survives normalization (weakly, under rounding)
            assert np.all(np.subtract.outer(A, A)[np.subtract.outer(xs, xs) > 0] >= 0)


class TestRatios:
    def test_identity(self):
        assert gspo_ratio([-1.0, -2.0], [-1.0, -2.0]) == 1.0

    @pytest.mark.parametrize("T", [1, 3, 7])
    def test_uniform_shift(self, T):
        old = -np.arange(1, T + 1, dtype=float)
        np.testing.assert_allclose(gspo_ratio(old + LN2, old), 2.0, rtol=1e-12)

    def test_single_token(self):
        np.testing.assert_allclose(gspo_ratio([-1 + LN4, -2.0], [-1.0, -2.0]), 2.0, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gspo_ratio([0.0], [0.0, 0.0])

    def test_masked_all_one(self):
        rng = np.random.default_rng(0)
        new, old = rng.normal(size=5), rng.normal(size=5)
        assert abs(masked_ratio(new, old, [1] * 5) - gspo_ratio(new, old)) < 1e-12

    def test_masked_all_zero(self):
        assert masked_ratio([3.0, 1.0], [0.0, 0.0], [0, 0]) == 1.0

    def test_masked_example(self):
        np.testing.assert_allclose(masked_ratio([LN3, np.log(100)], [0.0, 0.0], [1, 0]), 3.0, rtol=1e-12)

    def test_masked_rejects_length(self):
        with pytest.raises(ValueError):
            masked_ratio([0.0, 0.0], [0.0, 0.0], [1])


class TestClippedSurrogate:
    @pytest.mark.parametrize("s,A,expected", [(1.0, 2.0, 2.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)])
    def test_examples(self, s, A, expected):
        assert clipped_surrogate(s, A, 0.2) == pytest.approx(expected)


class TestObjectiveConfig:
    @pytest.mark.parametrize("kw", [{"lam": -1}, {"lam": 2.0}, {"epsilon": 0.0}, {"epsilon": 1.0},
                                    {"eta": -0.1}, {"group_size": 0}, {"correction_group_size": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ObjectiveConfig(**kw)

    def test_ratio_variant_tighter_lambda(self):
        ObjectiveConfig(lam=1.5, variant="IBPO_BASE")
        with pytest.raises(ValueError):
            ObjectiveConfig(lam=1.5, variant="IBPO_RATIO")


class TestMainObjective:
    def test_zero_at_old_params(self):
        rng = np.random.default_rng(1)
        task = make_task(1, 8, 3)
        params = PolicyParams(rng.normal(size=(n_rows(8), 8)), 8)
        g = _sampled_group(params, task, 8, rng)
        J, _ = main_objective(task, g, None, params, ObjectiveConfig(variant="GSPO"))
        assert abs(J) < 1e-12

    def test_gradient_at_old_params_is_score_average(self):
        from ibpo_lab.policy import grad_log_prob
        rng = np.random.default_rng(2)
        task = make_task(2, 8, 3)
        params = PolicyParams(rng.normal(size=(n_rows(8), 8)), 8)
        g = _sampled_group(params, task, 6, rng)
        _, grad = main_objective(task, g, None, params, ObjectiveConfig(variant="GSPO"))
        T = task.solution_length
        expected = sum(grad_log_prob(params, task, Mode.BASE, None, t.tokens).to_dense(n_rows(8)) * A / T
                       for t, A in zip(g.trajectories, g.advantages)) / g.size
        np.testing.assert_allclose(grad.to_dense(n_rows(8)), expected, atol=1e-12)

    @pytest.mark.parametrize("variant", ["GSPO", "IBPO_MASK"])
    def test_finite_differences(self, variant):
        rng = np.random.default_rng(3)
        V = 5
        task = make_task(3, V, 2)
        old = PolicyParams(rng.normal(size=(n_rows(V), V)), V)
        g = _sampled_group(old, task, 6, rng)
        comps = [_comparison(rng.integers(0, 2, size=task.solution_length)) for _ in range(6)]
        cfg = ObjectiveConfig(variant=variant, epsilon=0.2)
        worst = 0.0
        for _ in range(20):
            params = PolicyParams(old.logits + rng.normal(scale=0.1, size=old.logits.shape), V)
            _, grad = main_objective(task, g, comps, params, cfg)
            fd = _fd(lambda p: main_objective(task, g, comps, p, cfg)[0], params)
            worst = max(worst, _rel_err(grad.to_dense(n_rows(V)), fd))
        assert worst < 1e-4

    def test_all_one_masks_match_base(self):
        rng = np.random.default_rng(4)
        task = make_task(4, 8, 3)
        old = PolicyParams(rng.normal(size=(n_rows(8), 8)), 8)
        g = _sampled_group(old, task, 5, rng)
        params = PolicyParams(old.logits + rng.normal(scale=0.2, size=old.logits.shape), 8)
        comps = [_comparison([1] * task.solution_length)] * 5
        Jm, gm = main_objective(task, g, comps, params, ObjectiveConfig(variant="IBPO_MASK"))
        Jb, gb = main_objective(task, g, comps, params, ObjectiveConfig(variant="IBPO_BASE"))
        assert abs(Jm - Jb) < 1e-10
        np.testing.assert_allclose(gm.to_dense(n_rows(8)), gb.to_dense(n_rows(8)), atol=1e-12)

    def test_all_zero_mask_is_finite(self):
        rng = np.random.default_rng(5)
        task = make_task(5, 8, 3)
        old = PolicyParams(rng.normal(size=(n_rows(8), 8)), 8)
        g = _sampled_group(old, task, 4, rng)
        params = PolicyParams(old.logits + 1.0, 8)
        comps = [_comparison([0] * task.solution_length)] * 4
        J, grad = main_objective(task, g, comps, params, ObjectiveConfig(variant="IBPO_MASK"))
        assert np.isfinite(J) and np.all(np.isfinite(grad.values))
        np.testing.assert_allclose(grad.values, 0.0, atol=1e-15)

    def test_requires_advantages(self):
        task = make_task(6, 8, 2)
        g = GroupBatch(0, [Trajectory([0, 0, 0], [0.0] * 3)])
        with pytest.raises(ValueError):
            main_objective(task, g, None, PolicyParams.init(8), ObjectiveConfig())


class TestCorrectionObjective:
    def _groups(self, params, rng, Gc, n=3):
        V = params.V
        out = []
        for k in range(n):
            task = make_task(10 + k, V, 2)
            T = task.solution_length
            ctx = CorrectionContext(task, Trajectory(rng.integers(V, size=T), [0.0] * T),
                                    Trajectory(rng.integers(V, size=T), [0.0] * T))
            tokens, logps = sample_tokens(params, task, Mode.CORRECTION, Gc, rng, [ctx] * Gc)
            rewards = rng.integers(0, 2, size=Gc)
            out.append(CorrectionGroup(ctx, [Trajectory(t, lp, r) for t, lp, r in zip(tokens, logps, rewards)]))
        return out

    def test_singleton_groups_contribute_nothing(self):
        rng = np.random.default_rng(6)
        old = PolicyParams(rng.normal(size=(n_rows(5), 5)), 5)
        groups = self._groups(old, rng, 1)
        params = PolicyParams(old.logits + 0.3, 5)
        J, grad = correction_objective(groups, params, ObjectiveConfig())
        assert J == 0.0
        np.testing.assert_array_equal(grad.values, 0.0)

    def test_all_correct_group(self):
        rng = np.random.default_rng(7)
        old = PolicyParams(rng.normal(size=(n_rows(5), 5)), 5)
        groups = self._groups(old, rng, 4, n=1)
        groups[0].outputs = [z.with_reward(1) for z in groups[0].outputs]
        J, _ = correction_objective(groups, old, ObjectiveConfig())
        assert J == 0.0

    def test_empty(self):
        J, grad = correction_objective([], PolicyParams.init(5), ObjectiveConfig())
        assert J == 0.0 and len(grad.rows) == 0

    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        V = 5
        old = PolicyParams(rng.normal(size=(n_rows(V), V)), V)
        groups = self._groups(old, rng, 4)
        cfg = ObjectiveConfig()
        worst = 0.0
        for _ in range(20):
            params = PolicyParams(old.logits + rng.normal(scale=0.1, size=old.logits.shape), V)
            _, grad = correction_objective(groups, params, cfg)
            fd = _fd(lambda p: correction_objective(groups, p, cfg)[0], params)
            worst = max(worst, _rel_err(grad.to_dense(n_rows(V)), fd))
        assert worst < 1e-4


class TestTotalObjective:
    def test_eta_zero(self):
        g = SparseGradient.from_entries([(0, 1, 2.0)], 4)
        J, grad = total_objective(0.25, g, 0.5, SparseGradient.from_entries([(1, 1, 3.0)], 4), 0.0)
        assert J == 0.25 and grad is g

    def test_linear(self):
        gm = SparseGradient.from_entries([(0, 1, 2.0)], 4)
        gc = SparseGradient.from_entries([(0, 1, 1.0), (2, 3, -1.0)], 4)
        J, grad = total_objective(0.25, gm, 0.5, gc, 1.0)
        assert J == 0.75
        np.testing.assert_array_equal(grad.to_dense(3), gm.to_dense(3) + gc.to_dense(3))

    def test_rejects_negative_eta(self):
        with pytest.raises(ValueError):
            total_objective(0.0, SparseGradient.empty(4), 0.0, SparseGradient.empty(4), -1.0)
