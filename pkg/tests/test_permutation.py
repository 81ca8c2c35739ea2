import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import exact_expected_swaps
from rptlab import permutation as pm
from rptlab.errors import ParameterError, StructureError

plan_args = st.tuples(st.integers(2, 4), st.integers(0, 60), st.floats(0, 1), st.integers(0, 2**32 - 1)).map(
    lambda t: (t[0] + t[1], t[2], t[0], t[3])  # (n, q, w, seed) with n >= w
)


class TestSigmaTau:
    def test_worked_example_w2(self):
        plan = pm.make_plan(6, 2, [3])
        np.testing.assert_array_equal(plan.sigma, [1, 2, 4, 3, 5, 6])
        np.testing.assert_array_equal(plan.tau, [2, 3, 3, 5, 6, 7])
        np.testing.assert_array_equal(plan.deltas, [1, 1, -1, 2, 1, 1])

    def test_worked_example_w3(self):
        plan = pm.make_plan(7, 3, [3])
        np.testing.assert_array_equal(plan.sigma, [1, 2, 4, 5, 3, 6, 7])
        np.testing.assert_array_equal(plan.tau, [2, 3, 3, 3, 6, 7, 8])
        np.testing.assert_array_equal(plan.deltas, [1, 1, -1, -2, 3, 1, 1])

    def test_identity(self, rng):
        sigma, starts = pm.build_sigma(9, 0.0, 3, rng)
        np.testing.assert_array_equal(sigma, np.arange(1, 10))
        assert starts == []
        np.testing.assert_array_equal(pm.build_tau(sigma, [], 3), np.arange(2, 11))
        np.testing.assert_array_equal(pm.make_plan(9, 3).deltas, np.ones(9))

    @pytest.mark.parametrize("n,w", [(5, 1), (3, 4)])
    def test_bad_window(self, n, w, rng):
        with pytest.raises(ParameterError):
            pm.build_sigma(n, 0.1, w, rng)

    def test_bad_q(self, rng):
        with pytest.raises(ParameterError):
            pm.build_sigma(10, 1.2, 2, rng)

    def test_blocks_must_fit_and_not_overlap(self):
        with pytest.raises(ParameterError):
            pm.make_plan(6, 3, [5])
        with pytest.raises(ParameterError):
            pm.make_plan(8, 3, [1, 3])

    def test_malformed_sigma(self):
        with pytest.raises(StructureError):
            pm.build_tau([2, 1, 3, 4], [2], 2)
        with pytest.raises(StructureError):
            pm.build_tau([1, 3, 2, 4], [], 2)
        with pytest.raises(StructureError):
            pm.build_tau([1, 2, 3], [1], 2, n=4)

    def test_resume_after_block(self):
        class AllHits:
            def random(self, size):
                return np.zeros(size)

        assert pm.sample_swap_starts(10, 0.5, 3, AllHits()) == [1, 4, 7]

    def test_expected_count_formula(self):
        assert pm.expected_swap_count(4096, 0.02, 3) == pytest.approx(4096 * 0.02 / 1.04)
        assert abs(pm.expected_swap_count(4096, 0.02, 3) - exact_expected_swaps(4096, 0.02, 3)) < 0.1

    def test_swap_count_simulation(self):
        rng = np.random.default_rng(2024)
        counts = np.array([len(pm.sample_swap_starts(4096, 0.02, 3, rng)) for _ in range(10_000)])
        mean, se = counts.mean(), counts.std(ddof=1) / np.sqrt(counts.size)
        assert 75 <= mean <= 85
        assert abs(mean - pm.expected_swap_count(4096, 0.02, 3)) < 3 * se


class TestPlanProperties:
    @given(plan_args)
    def test_round_trip_and_blocks(self, args):
        n, q, w, seed = args
        plan = pm.sample_plan(n, q, w, np.random.default_rng(seed))
        tokens = np.arange(100, 100 + n)
        permuted = tokens[plan.sigma - 1]
        inverse = np.empty(n, dtype=int)
        inverse[plan.sigma - 1] = np.arange(n)
        np.testing.assert_array_equal(permuted[inverse], tokens)
        assert sorted(plan.sigma.tolist()) == list(range(1, n + 1))
        # scan: every displaced index lies inside exactly one declared block
        in_block = np.zeros(n, dtype=bool)
        for k in plan.swap_starts:
            assert not in_block[k - 1 : k + w - 1].any()
            in_block[k - 1 : k + w - 1] = True
            np.testing.assert_array_equal(plan.sigma[k - 1 : k + w - 1], list(range(k + 1, k + w)) + [k])
        np.testing.assert_array_equal(plan.sigma[~in_block], np.flatnonzero(~in_block) + 1)

    @given(plan_args)
    def test_tau_rule_and_deltas(self, args):
        n, q, w, seed = args
        plan = pm.sample_plan(n, q, w, np.random.default_rng(seed))
        starts = set(plan.swap_starts)
        block_of = {}
        for k in starts:
            for i in range(k, k + w - 1):
                block_of[i] = k
        for i in range(1, n + 1):
            prefix_closed = set(plan.sigma[:i].tolist()) == set(range(1, i + 1))
            if prefix_closed:
                assert plan.tau[i - 1] == i + 1
            else:
                assert plan.tau[i - 1] == block_of[i]
        block_deltas = {tuple(plan.deltas[k - 1 : k + w - 1]) for k in starts}
        assert len(block_deltas) <= 1
        if starts:
            assert block_deltas.pop() == tuple(-j for j in range(1, w)) + (w,)
        covered = np.zeros(n, dtype=bool)
        for k in starts:
            covered[k - 1 : k + w - 1] = True
        assert np.all(plan.deltas[~covered] == 1)
        assert plan.deltas.min() >= -(w - 1) and plan.deltas.max() <= w


class TestBatches:
    def test_targets_and_mask(self):
        tokens = np.array([10, 11, 12, 13, 14, 15])
        b = pm.batch_from_plan(tokens, pm.make_plan(6, 2, [3]))
        np.testing.assert_array_equal(b.permuted_tokens, [10, 11, 13, 12, 14, 15])
        np.testing.assert_array_equal(b.targets, [11, 12, 12, 14, 15, -1])
        np.testing.assert_array_equal(b.mask, [True] * 5 + [False])
        rec = b.to_record()
        assert set(rec) == {"tokens", "sigma", "tau", "deltas", "mask"}
        assert rec["sigma"] == [1, 2, 4, 3, 5, 6] and rec["mask"][-1] == 0

    def test_plan_length_mismatch(self):
        with pytest.raises(ParameterError):
            pm.batch_from_plan(np.arange(5), pm.make_plan(6, 2))

    def test_s_zero_and_q_zero(self, rng):
        tokens = np.arange(20)
        for _ in range(50):
            assert not pm.make_training_batch(tokens, 0.0, 0.5, 3, rng).permuted
            assert not pm.make_training_batch(tokens, 1.0, 0.0, 3, rng).permuted

    def test_parameter_errors(self, rng):
        with pytest.raises(ParameterError):
            pm.make_training_batch(np.arange(5), 1.5, 0.1, 2, rng)
        with pytest.raises(ParameterError):
            pm.make_training_batch(np.arange(5), 0.0, 1.5, 2, rng)
        with pytest.raises(ParameterError):
            pm.make_training_batch(np.arange(2), 0.5, 0.1, 3, rng)

    def test_reproducible_and_permuted_fraction(self):
        tokens = np.zeros(4096, dtype=int)
        a = pm.make_training_batch(tokens, 0.5, 0.02, 3, np.random.default_rng(7))
        b = pm.make_training_batch(tokens, 0.5, 0.02, 3, np.random.default_rng(7))
        assert a.to_record() == b.to_record()
        rng = np.random.default_rng(8)
        frac = np.mean([pm.make_training_batch(tokens, 0.5, 0.02, 3, rng).plan.swap_starts != () for _ in range(10_000)])
        assert 0.48 <= frac <= 0.52
