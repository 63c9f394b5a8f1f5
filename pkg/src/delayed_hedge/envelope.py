"""Concave envelope of a payoff and the buy-and-hold super-hedge it defines.

The envelope is taken over the whole real line.  An affine majorant
``a x + b`` of a payoff with asymptotic slopes ``a_L`` (left) and ``a_R``
(right) needs ``a_R <= a <= a_L``; the envelope is finite exactly when that
interval is non-empty.  For the bounded payoff class both tail slopes are 0,
so the only affine majorants are constants and the envelope collapses to the
constant ``sup f`` -- this module still runs the general hull construction and
lets the tail slopes do the collapsing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfiniteEnvelope
from .model_core import ModelParams, PayoffSpec, eval_payoff


@dataclass(frozen=True)
class EnvelopeResult:
    finite: bool
    hull_vertices: tuple  # ((x, fhat(x)), ...)
    left_slope: float
    right_slope: float
    value_at_s0: float = math.nan
    right_derivative_at_s0: float = math.nan

    def __call__(self, x):
        return envelope_value(self, x)


def _upper_hull(xs, ys):
    # monotone chain, upper part only; collinear points are dropped
    hull: list[tuple[float, float]] = []
    for p in zip(xs, ys):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def concave_envelope(spec: PayoffSpec) -> EnvelopeResult:
    a_left, a_right = spec.tail_slopes
    if a_right > a_left:
        return EnvelopeResult(False, (), a_left, a_right)
    hull = _upper_hull(spec.breakpoints, spec.values)

    def slope(i):
        (x1, y1), (x2, y2) = hull[i], hull[i + 1]
        return (y2 - y1) / (x2 - x1)

    # the left ray with slope a_left dominates hull segments steeper than it
    first = 0
    while first < len(hull) - 1 and slope(first) > a_left:
        first += 1
    # the right ray with slope a_right dominates segments flatter than it
    last = len(hull) - 1
    while last > first and slope(last - 1) < a_right:
        last -= 1
    vertices = tuple((float(x), float(y)) for x, y in hull[first : last + 1])
    return EnvelopeResult(True, vertices, float(a_left), float(a_right))


def envelope_value(env: EnvelopeResult, x):
    if not env.finite:
        return np.full(np.shape(x), math.inf) if np.ndim(x) else math.inf
    vx = np.array([v[0] for v in env.hull_vertices])
    vy = np.array([v[1] for v in env.hull_vertices])
    xa = np.asarray(x, dtype=float)
    out = np.interp(xa, vx, vy)
    out = np.where(xa < vx[0], vy[0] + env.left_slope * (xa - vx[0]), out)
    out = np.where(xa > vx[-1], vy[-1] + env.right_slope * (xa - vx[-1]), out)
    return float(out) if out.ndim == 0 else out


def right_derivative(env: EnvelopeResult, x: float) -> float:
    """Right derivative of the envelope; at a vertex the segment to its right counts."""
    if not env.finite:
        raise InfiniteEnvelope("envelope is +inf everywhere")
    vx = [v[0] for v in env.hull_vertices]
    vy = [v[1] for v in env.hull_vertices]
    if x < vx[0]:
        return env.left_slope
    if x >= vx[-1]:
        return env.right_slope
    i = int(np.searchsorted(vx, x, side="right")) - 1
    return (vy[i + 1] - vy[i]) / (vx[i + 1] - vx[i])


def superrep_price(spec: PayoffSpec, params: ModelParams) -> EnvelopeResult:
    """Super-replication price ``fhat(s0)`` and buy-and-hold hedge ``d+ fhat(s0)``.

    The returned result carries both numbers; the pair is certified against
    the payoff at every breakpoint and along both tails before returning.
    """
    env = concave_envelope(spec)
    if not env.finite:
        raise InfiniteEnvelope(f"concave envelope of {spec} is infinite")
    s0 = params.s0
    price = envelope_value(env, s0)
    hedge = right_derivative(env, s0)
    gap = certificate_gap(spec, s0, price, hedge)
    if gap < -1e-12:
        raise AssertionError(f"super-hedge certificate violated by {gap}")
    return EnvelopeResult(env.finite, env.hull_vertices, env.left_slope, env.right_slope, price, hedge)


def certificate_gap(spec: PayoffSpec, s0: float, price: float, hedge: float, extra_points=()) -> float:
    """Minimum of ``price + hedge (x - s0) - f(x)`` over breakpoints, tails and ``extra_points``.

    The tails are constant, so the affine super-hedge dominates them iff it
    has zero slope or, failing that, never (returned as ``-inf``).
    """
    a_left, a_right = spec.tail_slopes
    if hedge > a_left or hedge < a_right:
        return -math.inf
    pts = np.concatenate([np.asarray(spec.breakpoints), np.asarray(extra_points, dtype=float)])
    return float(np.min(price + hedge * (pts - s0) - eval_payoff(spec, pts)))
