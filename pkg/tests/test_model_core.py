import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayed_hedge.errors import DegenerateVariance, DiscontinuousTail, NegativeValue, NonMonotoneBreakpoints
from delayed_hedge.model_core import (
    ModelParams,
    PayoffSpec,
    SeededStream,
    butterfly,
    capped_call,
    constant_payoff,
    draw_normal_increments,
    eval_payoff,
    gauss_quadrature,
    golden_section_min,
    validate_payoff,
)


@st.composite
def payoffs(draw):
    n = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.floats(0.05, 3.0), min_size=n - 1, max_size=n - 1))
    x0 = draw(st.floats(-5, 5))
    xs = [x0] + list(x0 + np.cumsum(gaps))
    ys = draw(st.lists(st.floats(0.0, 4.0), min_size=n, max_size=n))
    return validate_payoff(xs, ys)


class TestModelParams:
    def test_valid(self):
        p = ModelParams(1, 2, 0.5, 3)
        assert p.to_dict() == {"s0": 1.0, "sigma": 2.0, "mu": 0.5, "T": 3.0}

    @pytest.mark.parametrize("kw", [dict(sigma=0), dict(sigma=-1), dict(T=0), dict(s0=math.nan), dict(mu=math.inf)])
    def test_rejects(self, kw):
        base = dict(s0=0.0, sigma=1.0, mu=0.0, T=1.0)
        base.update(kw)
        with pytest.raises(ValueError):
            ModelParams(**base)

    def test_json_roundtrip(self, tmp_path):
        p = ModelParams(0.3, 1.2, -0.1, 2.0)
        f = tmp_path / "p.json"
        f.write_text('{"s0": 0.3, "sigma": 1.2, "mu": -0.1, "T": 2.0}')
        assert ModelParams.from_json(f) == p


class TestPayoff:
    def test_capped_call_values(self):
        f = capped_call()
        assert eval_payoff(f, 0.5) == 0.5
        assert eval_payoff(f, -3) == 0.0
        assert eval_payoff(f, 7) == 1.0
        assert f.sup == 1.0

    def test_butterfly_interior(self):
        assert eval_payoff(butterfly(), 0.25) == 0.75

    def test_negative_value(self):
        with pytest.raises(NegativeValue):
            validate_payoff([0, 1, 2], [0, -0.1, 0])

    def test_discontinuous_tail(self):
        with pytest.raises(DiscontinuousTail):
            validate_payoff([0, 1], [0, 1], left_tail_value=0.5)

    def test_non_monotone(self):
        with pytest.raises(NonMonotoneBreakpoints):
            validate_payoff([0, 0, 1], [0, 1, 1])

    def test_pieces_cover_line(self):
        f = butterfly()
        for lo, hi, m, b in f.pieces():
            for x in (lo, hi):
                if math.isfinite(x):
                    assert math.isclose(b + m * x, f(x), abs_tol=1e-15)

    def test_json(self, tmp_path):
        f = tmp_path / "f.json"
        f.write_text('{"breakpoints": [-1, 0, 1], "values": [0, 1, 0]}')
        assert PayoffSpec.from_json(f) == butterfly()

    @given(payoffs(), st.floats(-20, 20))
    def test_matches_two_point_line(self, spec, x):
        xs, ys = spec.breakpoints, spec.values
        if x <= xs[0]:
            want = ys[0]
        elif x >= xs[-1]:
            want = ys[-1]
        else:
            i = int(np.searchsorted(xs, x, side="right")) - 1
            want = ys[i] + (ys[i + 1] - ys[i]) * (x - xs[i]) / (xs[i + 1] - xs[i])
        assert math.isclose(eval_payoff(spec, x), want, abs_tol=1e-12)

    @settings(max_examples=25)
    @given(payoffs())
    def test_sup_bounds_samples(self, spec):
        x = np.random.default_rng(0).uniform(-30, 30, 100_000)
        vals = eval_payoff(spec, x)
        assert vals.max() <= spec.sup
        assert vals.min() >= 0.0

    def test_bounded_growth(self):
        c, p = capped_call().growth_constants
        assert (c, p) == (1.0, 0.0)


class TestQuadrature:
    def test_two_point(self):
        q = gauss_quadrature(2)
        assert np.allclose(q.nodes, [-1, 1], atol=1e-14)
        assert np.allclose(q.weights, [0.5, 0.5], atol=1e-14)

    def test_fourth_moment(self):
        q = gauss_quadrature(20)
        assert abs(q.expect(lambda z: z ** 4) - 3.0) <= 1e-8

    @given(st.integers(2, 120), st.floats(-3, 3), st.floats(0.01, 10))
    def test_moment_invariants(self, n, mean, var):
        q = gauss_quadrature(n, mean, var)
        assert abs(q.weights.sum() - 1) <= 1e-12
        assert abs(q.expect(lambda z: z) - mean) <= 1e-10 * (1 + abs(mean))
        assert abs(q.expect(lambda z: (z - mean) ** 2) - var) <= 1e-8 * var
        assert np.all(q.weights > 0)

    def test_exact_for_polynomials(self):
        q = gauss_quadrature(5)
        # E Z^8 = 105 needs degree 8 <= 2n - 1
        assert abs(q.expect(lambda z: z ** 8) - 105.0) < 1e-9

    def test_errors(self):
        with pytest.raises(DegenerateVariance):
            gauss_quadrature(4, 0.0, 0.0)
        with pytest.raises(ValueError):
            gauss_quadrature(1)

    def test_read_only(self):
        q = gauss_quadrature(4)
        with pytest.raises(ValueError):
            q.nodes[0] = 1.0


class TestStreams:
    def test_deterministic(self):
        s = SeededStream(42, 3)
        assert np.array_equal(draw_normal_increments(s, 10), draw_normal_increments(s, 10))

    def test_indices_differ(self):
        a = draw_normal_increments(SeededStream(42, 0), 1000)
        b = draw_normal_increments(SeededStream(42, 1), 1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.15

    def test_substreams(self):
        s = SeededStream(1)
        assert not np.array_equal(draw_normal_increments(s.substream(0), 5), draw_normal_increments(s.substream(1), 5))

    def test_zero_variance(self):
        assert np.array_equal(draw_normal_increments(SeededStream(0), 4, 2.5, 0.0), np.full(4, 2.5))

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            draw_normal_increments(SeededStream(0), 4, 0.0, -1.0)

    def test_clt(self):
        x = draw_normal_increments(SeededStream(9), 10 ** 6)
        assert abs(x.mean()) <= 4 / math.sqrt(10 ** 6)


def test_golden_vectorised():
    centres = np.array([-1.0, 0.3, 2.0])
    x, fx = golden_section_min(lambda c: (c - centres) ** 2, np.full(3, -5.0), np.full(3, 5.0), tol=1e-12)
    assert np.allclose(x, centres, atol=1e-8)
    assert np.all(fx < 1e-14)


def test_golden_edge_minimum():
    x, fx = golden_section_min(lambda c: c, np.array([1.0]), np.array([2.0]))
    assert x[0] == 1.0


def test_constant_payoff():
    f = constant_payoff(2.0)
    assert f(-100) == f(100) == 2.0 and f.lipschitz == 0.0
