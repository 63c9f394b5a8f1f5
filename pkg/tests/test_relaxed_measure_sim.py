import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayed_hedge.errors import GridMismatch, PolicyError, ResolutionTooCoarse
from delayed_hedge.model_core import ModelParams, butterfly, constant_payoff
from delayed_hedge.relaxed_measure_sim import (
    VolatilityPolicy,
    drift_kappa,
    dual_report,
    entropy_estimate,
    entropy_lower_bound_check,
    ks_critical,
    predicted_control_drift,
    reference_terminal,
    relaxed_martingale_test,
    scaled_entropy_limit,
    simulate_paths,
    terminal_law_distance,
    weak_duality_bound,
)

UNIT = ModelParams(0.0, 1.0, 0.0, 1.0)
DRIFT = ModelParams(0.0, 1.0, 0.3, 1.0)


def flat(T=1.0):
    # sigma on every segment, with a genuine partition point
    return VolatilityPolicy((0.0, T / 2, T), (((0.0,), (1.0,)),))


def two_level():
    return VolatilityPolicy.two_level(1.0, 2.0)


class TestPolicy:
    def test_json_roundtrip(self, tmp_path):
        pol = VolatilityPolicy((0.0, 0.5, 0.75, 1.0), (((-1.0, 1.0), (0.5, 2.0)), ((0.0,), (1.5,))))
        f = tmp_path / "policy.json"
        import json

        f.write_text(json.dumps(pol.to_dict()))
        assert VolatilityPolicy.from_json(f) == pol

    def test_bound_and_lipschitz(self):
        pol = VolatilityPolicy((0.0, 0.5, 1.0), (((-1.0, 1.0), (0.5, 2.0)),))
        assert pol.bound == 2.0
        assert pol.lipschitz == 0.75

    def test_levels_clamped(self):
        pol = VolatilityPolicy((0.0, 0.5, 1.0), (((-1.0, 1.0), (0.5, 2.0)),))
        lev = pol.level(1, np.array([[-5.0], [0.0], [5.0]]), 1.0)
        assert np.allclose(lev, [0.5, 1.25, 2.0])
        assert np.all(pol.level(0, np.zeros((3, 1)), 1.0) == 1.0)

    @pytest.mark.parametrize(
        "partition,pieces",
        [((0.0, 0.5), ((((0.0,), (1.0,))),)), ((0.1, 1.0), ()), ((0.0, 0.6, 0.5, 1.0), ((((0.0,), (1.0,))),) * 2)],
    )
    def test_rejects(self, partition, pieces):
        with pytest.raises(PolicyError):
            VolatilityPolicy(partition, pieces)

    def test_delay_ordering(self):
        pol = VolatilityPolicy((0.0, 0.5, 0.55, 1.0), (((0.0,), (1.0,)), ((0.0,), (1.0,))))
        with pytest.raises(PolicyError):
            simulate_paths(pol, 0.1, UNIT, P=1000)

    def test_history_functions(self):
        pol = VolatilityPolicy((0.0, 0.5, 1.0), (), history_fns=(lambda obs: 1.0 + 0 * obs[:, 0],), declared_bound=1.0, declared_lipschitz=0.0)
        ens = simulate_paths(pol, 0.1, UNIT, P=1000, seed=1)
        X, S = ens.at(1.0)
        assert np.allclose(S, X, atol=1e-12)


class TestDrift:
    def test_flat_policy(self):
        x = np.cumsum(np.random.default_rng(0).normal(0, 0.1, 101))
        for t in (0.0, 0.3, 0.5, 0.9):
            assert drift_kappa(x, t, flat(), 0.1, DRIFT) == pytest.approx(0.3)

    def test_before_first_partition_point(self):
        x = np.random.default_rng(1).normal(0, 1, 101)
        assert drift_kappa(x, 0.2, two_level(), 0.1, DRIFT) == pytest.approx(0.3)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(0.5, 1.0))
    def test_clamp_bound(self, seed, t):
        x = np.cumsum(np.random.default_rng(seed).normal(0, 0.3, 201))
        pol = VolatilityPolicy((0.0, 0.5, 1.0), (((-1.0, 1.0), (0.2, 3.0)),))
        H = 0.05
        bound = (abs(DRIFT.mu) + max(abs(3.0 - 1.0), abs(0.2 - 1.0)) / H) / DRIFT.sigma
        assert abs(drift_kappa(x, t, pol, H, DRIFT)) <= bound + 1e-12

    def test_pathwise_reconstruction(self):
        # S from the scalar drift on one path agrees with the simulator
        H, delta = 0.1, 0.005
        grid = np.round(np.arange(0, 201) * delta, 12)
        ens = simulate_paths(two_level(), H, DRIFT, delta=delta, P=1000, seed=3, record_times=grid)
        x = ens.X[0]
        kap = []
        for k in range(200):
            right = grid[k + 1] - (1e-13 if grid[k + 1] == 0.5 else 0.0)
            kap.append((drift_kappa(x, grid[k], two_level(), H, DRIFT, grid), drift_kappa(x, right, two_level(), H, DRIFT, grid)))
        g = DRIFT.mu - DRIFT.sigma * np.array(kap)
        S = DRIFT.s0 + DRIFT.sigma * x + np.concatenate([[0.0], np.cumsum(0.5 * delta * g.sum(axis=1))])
        assert np.allclose(S, ens.S[0], atol=1e-9)


class TestSimulation:
    def test_flat_identity(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=2000, seed=2)
        X, S = ens.at(1.0)
        assert np.max(np.abs(S - UNIT.s0 - X)) <= 1e-12
        assert np.all(ens.S[:, 0] == UNIT.s0)

    def test_brownian_terminal_mean(self):
        ens = simulate_paths(two_level(), 0.1, UNIT, P=4000, seed=4)
        assert abs(ens.at(1.0)[0].mean()) <= 4 * math.sqrt(1.0 / 4000)

    def test_increment_moments(self):
        ens = simulate_paths(two_level(), 0.1, UNIT, P=2000, seed=5)
        n = 2000 * round(1.0 / ens.delta)
        assert abs(ens.increment_mean) <= 4 * math.sqrt(ens.delta / n)
        assert abs(ens.increment_var / ens.delta - 1) <= 4 * math.sqrt(2 / n)

    def test_resolution_checks(self):
        with pytest.raises(ResolutionTooCoarse):
            simulate_paths(two_level(), 0.1, UNIT, delta=0.02, P=1000)
        with pytest.raises(ResolutionTooCoarse):
            simulate_paths(two_level(), 0.1, UNIT, delta=0.003, P=1000)
        with pytest.raises(ValueError):
            simulate_paths(two_level(), 0.1, UNIT, P=999)

    def test_seed_and_threads(self):
        a = simulate_paths(two_level(), 0.1, UNIT, P=1500, seed=11)
        b = simulate_paths(two_level(), 0.1, UNIT, P=1500, seed=11, threads=3)
        c = simulate_paths(two_level(), 0.1, UNIT, P=1500, seed=12)
        assert np.array_equal(a.S, b.S) and np.array_equal(a.kappa_sq, b.kappa_sq)
        assert not np.array_equal(a.S, c.S)


class TestEntropy:
    def test_flat_driftless_zero(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=1000)
        assert entropy_estimate(ens) == (0.0, 0.0)

    def test_flat_with_drift(self):
        ens = simulate_paths(flat(), 0.1, DRIFT, P=1000)
        val, _ = entropy_estimate(ens)
        assert abs(val - 0.3 ** 2 / 2) <= 1e-12

    def test_path_count_invariance(self):
        a = entropy_estimate(simulate_paths(two_level(), 0.1, UNIT, P=1000, seed=1))
        b = entropy_estimate(simulate_paths(two_level(), 0.1, UNIT, P=8000, seed=2))
        assert abs(a[0] - b[0]) <= 4 * math.hypot(a[1], b[1])
        assert b[1] < a[1]

    @pytest.mark.slow
    def test_scaling_limit(self):
        ens = simulate_paths(two_level(), 1 / 128, UNIT, P=20_000, seed=7)
        target = scaled_entropy_limit(two_level(), UNIT)
        assert target == 0.25
        assert abs(ens.H * entropy_estimate(ens)[0] - target) <= 0.05 * target


class TestMartingale:
    def test_flat_policy(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=4000, seed=21)
        assert all(abs(m.z) <= 3 for m in relaxed_martingale_test(ens))

    def test_construction(self):
        ens = simulate_paths(two_level(), 1 / 16, UNIT, P=10_000, seed=22, record_times=(0.25, 0.75, 0.6, 0.9, 0.6 - 1 / 16))
        stats_ = relaxed_martingale_test(ens, pairs=[(0.0, 0.5), (0.5, 1.0), (0.25, 0.75), (0.6, 0.9)])
        assert all(abs(m.z) <= 3 for m in stats_)

    def test_negative_control(self):
        ens = simulate_paths(two_level(), 1 / 16, UNIT, P=4000, seed=23, clamp_offset=0.5)
        m = [m for m in relaxed_martingale_test(ens, pairs=[(0.5, 1.0)]) if m.test == "one"][0]
        assert m.z > 5
        pred = predicted_control_drift(ens, 0.5, 1.0)
        assert pred == pytest.approx(0.5 * (2.0 - 1.0) * 16 * 0.5, rel=1e-6)
        assert abs(m.statistic - pred) <= 4 * m.stderr

    def test_unrecorded_time(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=1000)
        with pytest.raises(GridMismatch):
            relaxed_martingale_test(ens, pairs=[(0.13, 0.5)])


class TestWeakDuality:
    def test_cash_payoff(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=1000)
        bound, se = weak_duality_bound(ens, 1.0, constant_payoff(0.8))
        assert abs(bound - 0.8) <= 1e-12 and se <= 1e-12

    def test_zero_payoff(self):
        ens = simulate_paths(two_level(), 0.1, UNIT, P=1000)
        bound, _ = weak_duality_bound(ens, 1.0, constant_payoff(0.0))
        assert bound <= 0.0
        assert bound == pytest.approx(-0.1 * entropy_estimate(ens)[0])


class TestEntropyLowerBound:
    def test_flat_zero(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=1000)
        lhs, _, rhs, _ = entropy_lower_bound_check(ens, 2)
        assert lhs == 0.0 and rhs == 0.0

    def test_inequality_and_monotone_prefactor(self):
        ens = simulate_paths(two_level(), 0.05, UNIT, P=4000, seed=31)
        rhs = []
        for M in (1, 2, 5):
            lhs, lse, r, rse = entropy_lower_bound_check(ens, M)
            assert lhs >= r - 3 * math.hypot(lse, rse)
            rhs.append(r)
        assert rhs[0] < rhs[1] < rhs[2]
        assert rhs[1] / rhs[0] == pytest.approx((2 / 3) / (1 / 2))

    def test_grid_mismatch(self):
        ens = simulate_paths(two_level(), 0.1, UNIT, P=1000)
        with pytest.raises(GridMismatch):
            entropy_lower_bound_check(ens, 3)


class TestTerminalLaw:
    def test_flat_identical(self):
        ens = simulate_paths(flat(), 0.1, UNIT, P=10_000, seed=41)
        # coupled samples agree up to rounding
        assert terminal_law_distance(ens) <= 1e-3
        assert terminal_law_distance(ens, coupled=False) <= ks_critical(10_000)

    def test_reference_law(self):
        ens = simulate_paths(two_level(), 0.1, UNIT, P=10_000, seed=42)
        ref = reference_terminal(ens, coupled=False)
        # s0 + W_{1/2} + 2 (W_1 - W_{1/2}) has variance 2.5
        assert abs(ref.var() - 2.5) <= 0.1

    def test_threshold_formula(self):
        assert ks_critical(10_000) == pytest.approx(1.63 * math.sqrt(2 / 10_000))

    @pytest.mark.slow
    def test_decreasing_in_delay(self):
        ks = [terminal_law_distance(simulate_paths(two_level(), H, UNIT, P=10_000, seed=43)) for H in (1 / 16, 1 / 64, 1 / 256)]
        assert ks[0] > ks[1] > ks[2]


def test_dual_report():
    ens = simulate_paths(two_level(), 0.1, UNIT, P=1000, seed=51)
    rep = dual_report(ens, 1.0, butterfly(), M_list=(1, 2, 3))
    assert [p[0] for p in rep.entropy_lower_bound_pairs] == [1, 2]
    assert rep.entropy >= 0 and math.isfinite(rep.entropy_stderr)
    assert rep.scaled_entropy == pytest.approx(0.1 * rep.entropy)
    assert set(rep.to_dict()) >= {"entropy", "weak_duality_bound", "martingale_stats"}
