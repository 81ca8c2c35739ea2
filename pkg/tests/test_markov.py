import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rptlab import markov as mk
from rptlab import prob
from rptlab.errors import (
    ConvergenceError,
    DegenerateRatioError,
    DimensionError,
    NonErgodicError,
    ParameterError,
)

D2 = np.array([[0.6, 0.3], [0.4, 0.7]])  # D[a, b] = p(a | b)
C2 = np.array([[0.9, 0.2], [0.1, 0.8]])  # C[b, a] = p(b | a)
# hand-multiplied rows: b = 0 -> (.54, .06, .08, .32); b = 1 -> (.27, .03, .14, .56)
P2 = np.array(
    [
        [0.54, 0.06, 0.08, 0.32],
        [0.27, 0.03, 0.14, 0.56],
        [0.54, 0.06, 0.08, 0.32],
        [0.27, 0.03, 0.14, 0.56],
    ]
)

seeds = st.integers(0, 2**32 - 1)


def brute_dobrushin(p):
    return max(0.5 * np.abs(p[i] - p[j]).sum() for i, j in combinations(range(p.shape[0]), 2))


class TestKernel:
    def test_hand_multiplied_v2(self):
        np.testing.assert_allclose(mk.build_rpt_kernel(D2, C2), P2, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mk.build_rpt_kernel(np.eye(2), np.eye(3))

    @given(st.integers(2, 7), seeds)
    def test_rows_stochastic_and_depend_on_next_only(self, v, seed):
        pi = prob.random_joint(v, np.random.default_rng(seed))
        _, c, d = prob.conditionals_from_joint(pi)
        p = mk.build_rpt_kernel(d, c)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)
        rows = p.reshape(v, v, v * v)
        np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    @given(st.integers(2, 8), seeds)
    def test_truth_is_stationary(self, v, seed):
        pi = prob.random_joint(v, np.random.default_rng(seed))
        _, c, d = prob.conditionals_from_joint(pi)
        flat = pi.ravel()
        np.testing.assert_allclose(flat @ mk.build_rpt_kernel(d, c), flat, atol=1e-10)


class TestStationary:
    def test_rank_one(self):
        v = prob.normalize(np.arange(1.0, 5.0))
        out, iters = mk.power_iteration(np.tile(v, (4, 1)))
        np.testing.assert_allclose(out, v, atol=1e-15)
        assert iters <= 2

    def test_identity_does_not_converge(self):
        with pytest.raises(ConvergenceError) as info:
            mk.power_iteration(np.eye(4), initial=np.array([0.1, 0.2, 0.3, 0.4]))
        assert info.value.residual <= 1e-12  # the chains are stuck, not diverging

    def test_iteration_cap(self):
        slow = np.array([[1 - 1e-6, 1e-6], [1e-6, 1 - 1e-6]])
        with pytest.raises(ConvergenceError) as info:
            mk.power_iteration(slow, initial=np.array([1.0, 0.0]), max_iters=50)
        assert info.value.iterations == 50

    def test_recovers_truth(self, rng):
        for _ in range(3):
            pi = prob.random_joint(20, rng)
            _, c, d = prob.conditionals_from_joint(pi)
            start = prob.random_joint(20, rng).ravel()
            got = mk.stationary_distribution(mk.build_rpt_kernel(d, c), initial=start)
            assert prob.tv_distance(got.ravel(), pi.ravel()) < 1e-10

    def test_not_a_pair_kernel(self):
        with pytest.raises(DimensionError):
            mk.stationary_distribution(np.full((3, 3), 1 / 3))


class TestErgodicity:
    def test_rank_one_and_identity(self):
        assert mk.ergodicity_coefficient(np.tile([0.2, 0.8], (2, 1))) == 0.0
        assert mk.ergodicity_coefficient(np.eye(4)) == 1.0

    def test_hand_built(self):
        p = np.array(
            [[0.5, 0.3, 0.2, 0.0], [0.1, 0.6, 0.2, 0.1], [0.25, 0.25, 0.25, 0.25], [0.4, 0.1, 0.1, 0.4]]
        )
        assert mk.ergodicity_coefficient(p) == pytest.approx(brute_dobrushin(p), abs=1e-15)
        # rows 1 and 3 differ most: (0.3 + 0.5 + 0.1 + 0.3) / 2
        assert mk.ergodicity_coefficient(p) == pytest.approx(0.6)

    @given(st.integers(2, 4), seeds)
    def test_matches_brute_force_and_permutation_invariant(self, v, seed):
        g = np.random.default_rng(seed)
        _, c, d = prob.conditionals_from_joint(prob.random_joint(v, g))
        p = mk.build_rpt_kernel(d, c)
        lam = mk.ergodicity_coefficient(p)
        assert lam == pytest.approx(brute_dobrushin(p), abs=1e-14)
        perm = g.permutation(p.shape[0])
        assert mk.ergodicity_coefficient(p[np.ix_(perm, perm)]) == pytest.approx(lam, abs=1e-14)

    def test_condition_number(self):
        assert mk.condition_number(np.tile([0.5, 0.5], (2, 1))) == 1.0
        assert mk.condition_number(np.array([[1.0, 0.0], [0.5, 0.5]])) == pytest.approx(2.0)
        with pytest.raises(NonErgodicError):
            mk.condition_number(np.eye(3))

    def test_condition_number_composes(self, rng):
        _, c, d = prob.conditionals_from_joint(prob.random_joint(6, rng))
        p = mk.build_rpt_kernel(d, c)
        assert mk.condition_number(p) == pytest.approx(1 / (1 - mk.ergodicity_coefficient(p)))


class TestPerturbations:
    def test_bundle_consistency(self, rng):
        pi = prob.random_joint(5, rng)
        b, _ = mk.mixed_bundle(pi, 0.1, 0.05, rng)
        np.testing.assert_allclose(b.hat_marginal, b.marginal + b.eps_marginal, atol=1e-12)
        np.testing.assert_allclose(b.eps_marginal.sum(), 0.0, atol=1e-12)
        np.testing.assert_allclose(b.eps_next_given_prev.sum(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(b.eps_prev_given_next.sum(axis=0), 0.0, atol=1e-12)

    def test_zero_perturbation(self, rng):
        pi = prob.random_joint(4, rng)
        m, c, d = prob.conditionals_from_joint(pi)
        b = mk.make_bundle(pi, m, c, d)
        _, err, lin = mk.ntp_joint_error(b)
        np.testing.assert_allclose(err, 0.0, atol=1e-15)
        np.testing.assert_allclose(lin, 0.0, atol=1e-15)
        with pytest.raises(DegenerateRatioError):
            mk.rpt_factor(b, 1.0)

    def test_tightness_construction(self):
        b = mk.tight_ntp_bundle(alpha=0.3, eps=0.1)
        _, err, _ = mk.ntp_joint_error(b)
        assert abs(prob.l1_norm(err) - mk.ntp_error_bound(b)) <= 1e-14
        assert prob.l1_norm(err) == pytest.approx(prob.l1_norm(b.eps_marginal), abs=1e-15)

    def test_tightness_rejects_bad_eps(self):
        with pytest.raises(ParameterError):
            mk.tight_ntp_bundle(alpha=0.3, eps=0.5)

    def test_oracle_ptp_factor(self, rng):
        b, _ = mk.mixed_bundle(prob.random_joint(6, rng), 0.2, 0.0, rng)
        kappa = 1.7
        expected = kappa * prob.max_norm(b.eps_next_given_prev) / (
            prob.l1_norm(b.eps_marginal) + prob.max_norm(b.eps_next_given_prev)
        )
        assert mk.rpt_factor(b, kappa) == pytest.approx(expected, rel=1e-14)
        with pytest.raises(ParameterError):
            mk.rpt_error_bound(b, 0.5)

    def test_first_order_residual_is_quadratic(self, rng):
        rows = mk.first_order_residuals(prob.random_joint(8, rng), [1e-2, 1e-3, 1e-4], rng)
        for name in ("ntp_residual", "kernel_residual"):
            r = [row[name] for row in rows]
            assert 95 < r[0] / r[1] < 105 and 95 < r[1] / r[2] < 105

    @given(seeds)
    def test_bounds_hold_for_small_bundles(self, seed):
        delta = 1e-3
        g = np.random.default_rng(seed)
        b, _ = mk.mixed_bundle(prob.random_joint(4, g), delta, delta, g)
        row = mk.bound_check(b)
        slack = 1 + 10 * delta
        assert row["ntp_l1"] <= row["ntp_bound"] * slack
        assert row["kernel_err"] <= row["kernel_bound"] * slack
        assert row["rpt_l1"] <= row["rpt_bound"] * slack


class TestSynthetic:
    def test_config_validation(self):
        for bad in (
            mk.SyntheticConfig(trials=0),
            mk.SyntheticConfig(base_noise=0.0),
            mk.SyntheticConfig(ratio=1.5),
            mk.SyntheticConfig(vocab_size=1),
        ):
            with pytest.raises(ParameterError):
                bad.validate()

    def test_noiseless_trial(self, rng):
        r = mk.synthetic_trial(5, 0.0, 0.0, rng)
        assert r.ntp_tv < 1e-15 and r.rpt_tv < 1e-10 and math.isnan(r.rpt_factor)

    def test_trial_fields_and_determinism(self):
        cfg = mk.SyntheticConfig(vocab_size=6, base_noise=0.5, ratio=0.5, trials=1, seed=3)
        a = mk.run_synthetic_trial(cfg, mk.trial_rng(3, 0))
        b = mk.run_synthetic_trial(cfg, mk.trial_rng(3, 0))
        assert a == b
        for name in mk.TRIAL_FIELDS:
            assert math.isfinite(getattr(a, name)) and getattr(a, name) >= 0
        assert 0 <= a.ntp_tv <= 1 and 0 <= a.rpt_tv <= 1

    def test_oracle_ptp_mostly_wins(self):
        rs = [mk.synthetic_trial(20, 1.0, 0.0, mk.trial_rng(0, i)) for i in range(30)]
        wins = sum(r.rpt_tv < r.ntp_tv for r in rs)
        assert wins >= 25
        assert np.mean([r.rpt_tv for r in rs]) < np.mean([r.ntp_tv for r in rs])

    def test_parallel_matches_serial(self):
        cfgs = mk.default_grid(trials=3, seed=5, vocab_size=5, ratios=(0.0, 0.5), base_noises=(0.1,))
        serial = mk.run_synthetic_sweep(cfgs, parallelism=1)
        parallel = mk.run_synthetic_sweep(cfgs, parallelism=2)
        assert serial.records == parallel.records and not serial.failures

    def test_single_trial_report(self):
        cfg = mk.SyntheticConfig(vocab_size=5, base_noise=0.3, ratio=0.5, trials=1, seed=2)
        rep = mk.run_synthetic_experiment([cfg])
        single = mk.run_synthetic_trial(cfg, mk.trial_rng(2, 0))
        assert len(rep.records) == 1 and len(rep.aggregates) == 1
        assert rep.records[0]["rpt_tv"] == single.rpt_tv
        assert rep.aggregates[0]["rpt_tv_mean"] == single.rpt_tv

    def test_failures_are_logged_not_raised(self, monkeypatch):
        real = mk.run_synthetic_trial

        def flaky(config, rng):
            if config.ratio == 0.5:
                raise ConvergenceError("stuck", residual=1.0, iterations=7)
            return real(config, rng)

        monkeypatch.setattr(mk, "run_synthetic_trial", flaky)
        cfgs = mk.default_grid(trials=2, seed=0, vocab_size=4, ratios=(0.0, 0.5), base_noises=(0.1,))
        out = mk.run_synthetic_sweep(cfgs)
        assert len(out.records) == 2 and len(out.failures) == 2
        assert "ConvergenceError" in out.failures[0]["error"]
