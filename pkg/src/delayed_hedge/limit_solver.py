"""Scaling-limit price as a one-dimensional transport problem.

The limit value is

    sup over zeta with E[zeta(Z)] = 0 of
        E[ f(s0 + zeta(Z)) - (zeta(Z) - sigma Z)^2 / (2 A sigma^2) ],   Z ~ N(0, T),

evaluated on a Gaussian quadrature for ``Z``.  A multiplier ``lam`` for the
mean constraint decouples the nodes: each node maximises

    g(zeta) = f(s0 + zeta) - c (zeta - sigma z)^2 - lam zeta,   c = 1/(2 A sigma^2),

which is a concave quadratic on every linear piece of ``f``, so the global
maximiser is found exactly among the clamped piece vertices.

For non-concave payoffs the per-node maximiser can jump as ``lam`` moves, and
on a finite rule the constraint function may skip over zero.  The solver then
mixes the two one-sided profiles at the root (a randomised transport map);
the mixed value equals the Lagrangian dual value, which is the quadrature
image of the continuum problem, and ``randomized`` is set on the result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BracketingFailure
from .model_core import ModelParams, PayoffSpec, QuadratureRule, eval_payoff, gauss_quadrature

DEFAULT_NODES = 64


@dataclass(frozen=True)
class LimitProblem:
    A: float
    params: ModelParams
    spec: PayoffSpec
    quad: QuadratureRule

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError(f"A must be > 0, got {self.A}")
        if not math.isclose(self.quad.variance, self.params.T, rel_tol=1e-12):
            raise ValueError("quadrature variance must equal the horizon T")
        if abs(self.quad.mean) > 1e-14:
            raise ValueError("quadrature must be centred")

    @classmethod
    def build(cls, A, params, spec, nodes=DEFAULT_NODES) -> "LimitProblem":
        return cls(float(A), params, spec, gauss_quadrature(nodes, 0.0, params.T))

    @property
    def penalty(self) -> float:
        return 1.0 / (2.0 * self.A * self.params.sigma ** 2)


@dataclass(frozen=True)
class LimitSolution:
    multiplier: float
    zeta_values: np.ndarray
    value: float
    constraint_residual: float
    randomized: bool = False
    # when randomized: zeta_values w.p. mix_weight, zeta_alt otherwise
    zeta_alt: np.ndarray | None = field(default=None, repr=False)
    mix_weight: float = 1.0
    pointwise_residual: float = 0.0
    iterations: int = 0


def _piece_arrays(spec: PayoffSpec, s0: float):
    lo, hi, slope, icpt = (np.array(v) for v in zip(*spec.pieces()))
    # shift to zeta coordinates, x = s0 + zeta
    return lo - s0, hi - s0, slope, icpt + slope * s0


def _argmax(z, lam, problem: LimitProblem):
    """Vectorised exact argmax over zeta for nodes ``z`` (1D array)."""
    lo, hi, slope, icpt = _piece_arrays(problem.spec, problem.params.s0)
    c = problem.penalty
    sz = problem.params.sigma * np.asarray(z, dtype=float)[:, None]
    vertex = sz + (slope[None, :] - lam) / (2.0 * c)
    cand = np.clip(vertex, lo[None, :], hi[None, :])
    g = icpt[None, :] + slope[None, :] * cand - c * (cand - sz) ** 2 - lam * cand
    # pieces are ordered left to right; argmax returns the first maximiser,
    # i.e. the smallest zeta among exact ties
    k = np.argmax(g, axis=1)
    rows = np.arange(len(k))
    return cand[rows, k], g[rows, k]


def pointwise_argmax(z: float, multiplier: float, problem: LimitProblem) -> float:
    zeta, _ = _argmax(np.atleast_1d(float(z)), float(multiplier), problem)
    return float(zeta[0])


def _objective_terms(zeta, problem: LimitProblem):
    p = problem.params
    return eval_payoff(problem.spec, p.s0 + zeta) - problem.penalty * (zeta - p.sigma * problem.quad.nodes) ** 2


def constraint_function(lam: float, problem: LimitProblem) -> float:
    zeta, _ = _argmax(problem.quad.nodes, lam, problem)
    return float(np.dot(problem.quad.weights, zeta))


def multiplier_root(problem: LimitProblem, tol: float = 1e-8, xtol: float = 1e-10, max_iter: int = 400):
    """Bisection for ``G(lam) = sum_i w_i zeta*_lam(z_i) = 0``.

    ``G`` is non-increasing, non-negative at the smallest payoff slope and
    non-positive at the largest, which gives the starting bracket; the bracket
    is widened geometrically if rounding spoils a sign.  Returns
    ``(lam_best, lo, hi, trace)`` where ``lam_best`` minimises ``|G|`` over the
    trace and ``[lo, hi]`` is the final bracket with ``G(lo) >= 0 >= G(hi)``.
    """
    slopes = [0.0, *problem.spec.slopes]
    lo, hi = min(slopes), max(slopes)
    w = problem.quad.weights
    nodes = problem.quad.nodes

    def G(lam):
        zeta, _ = _argmax(nodes, lam, problem)
        return float(np.dot(w, zeta))

    g_lo, g_hi = G(lo), G(hi)
    step = 1.0
    while g_lo < 0:
        lo -= step
        step *= 2
        if abs(lo) > 1e6:
            raise BracketingFailure("no lower bracket within |lam| <= 1e6")
        g_lo = G(lo)
    step = 1.0
    while g_hi > 0:
        hi += step
        step *= 2
        if abs(hi) > 1e6:
            raise BracketingFailure("no upper bracket within |lam| <= 1e6")
        g_hi = G(hi)
    trace = [(lo, g_lo), (hi, g_hi)]
    for _ in range(max_iter):
        best = min(trace, key=lambda t: abs(t[1]))
        if abs(best[1]) <= tol and hi - lo <= xtol:
            break
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        g_mid = G(mid)
        trace.append((mid, g_mid))
        if g_mid == 0.0:
            lo = hi = mid
            g_lo = g_hi = 0.0
            break
        if g_mid > 0:
            lo, g_lo = mid, g_mid
        else:
            hi, g_hi = mid, g_mid
    best = min(trace, key=lambda t: abs(t[1]))
    return best[0], (lo, g_lo), (hi, g_hi), trace


def limit_value(problem: LimitProblem, tol: float = 1e-8) -> LimitSolution:
    """Solve the quadrature transport problem and report the limit value."""
    w = problem.quad.weights
    nodes = problem.quad.nodes
    lam, (lo, g_lo), (hi, g_hi), trace = multiplier_root(problem, tol=tol)
    zeta, _ = _argmax(nodes, lam, problem)
    resid = abs(float(np.dot(w, zeta)))
    if resid <= tol:
        value = float(np.dot(w, _objective_terms(zeta, problem)))
        return LimitSolution(lam, zeta, value, resid, pointwise_residual=resid, iterations=len(trace))
    # G jumps across zero between lo and hi: mix the one-sided profiles
    z_lo, _ = _argmax(nodes, lo, problem)
    z_hi, _ = _argmax(nodes, hi, problem)
    theta = g_hi / (g_hi - g_lo)  # weight on the lo profile
    v_lo = float(np.dot(w, _objective_terms(z_lo, problem)))
    v_hi = float(np.dot(w, _objective_terms(z_hi, problem)))
    value = theta * v_lo + (1.0 - theta) * v_hi
    mixed = abs(theta * float(np.dot(w, z_lo)) + (1.0 - theta) * float(np.dot(w, z_hi)))
    return LimitSolution(
        multiplier=0.5 * (lo + hi),
        zeta_values=z_lo,
        value=value,
        constraint_residual=mixed,
        randomized=True,
        zeta_alt=z_hi,
        mix_weight=theta,
        pointwise_residual=resid,
        iterations=len(trace),
    )


def dual_value(problem: LimitProblem, lam: float) -> float:
    """Lagrangian dual ``sum_i w_i max_zeta g_i(zeta)``; an upper bound for every ``lam``."""
    _, g = _argmax(problem.quad.nodes, lam, problem)
    return float(np.dot(problem.quad.weights, g))


def risk_neutral_value(problem: LimitProblem) -> float:
    p = problem.params
    return float(np.dot(problem.quad.weights, eval_payoff(problem.spec, p.s0 + p.sigma * problem.quad.nodes)))


def limit_value_bruteforce(problem: LimitProblem, resolution: int = 4001, n_multipliers: int = 10_000):
    """Grid oracle for :func:`limit_value` on small rules (at most 12 nodes).

    Every node maximises over a fixed zeta grid (payoff kinks included); an
    outer sweep over ``n_multipliers`` evenly spaced multipliers records the
    constraint value of each pointwise grid argmax.  The best feasible value
    is the mixture of the two sweep profiles whose constraint values straddle
    zero.  Returns ``(value, dual_upper_bound)``.
    """
    nodes = problem.quad.nodes
    w = problem.quad.weights
    if len(nodes) > 12:
        raise ValueError("brute force is meant for rules with at most 12 nodes")
    p = problem.params
    c = problem.penalty
    slopes = [0.0, *problem.spec.slopes]
    s_lo, s_hi = min(slopes), max(slopes)
    reach = (s_hi - s_lo + 1.0) / (2.0 * c)
    kinks = np.asarray(problem.spec.breakpoints) - p.s0
    left = min(p.sigma * nodes.min(), kinks.min()) - reach
    right = max(p.sigma * nodes.max(), kinks.max()) + reach
    grid = np.union1d(np.linspace(left, right, resolution), kinks)
    # h[i, k]: objective of node i at grid point k
    h = eval_payoff(problem.spec, p.s0 + grid)[None, :] - c * (grid[None, :] - p.sigma * nodes[:, None]) ** 2
    lams = np.linspace(s_lo - 1e-3, s_hi + 1e-3, n_multipliers)
    G = np.empty(n_multipliers)
    V = np.empty(n_multipliers)
    D = np.empty(n_multipliers)
    rows = np.arange(len(nodes))[None, :]
    for start in range(0, n_multipliers, 100):
        sl = slice(start, start + 100)
        tilted = h[None, :, :] - lams[sl, None, None] * grid[None, None, :]
        k = np.argmax(tilted, axis=2)
        G[sl] = grid[k] @ w
        V[sl] = h[rows, k] @ w
        D[sl] = np.max(tilted, axis=2) @ w
    best = -math.inf
    for j in range(n_multipliers - 1):
        if G[j] >= 0 >= G[j + 1]:
            if G[j] == G[j + 1]:
                best = max(best, V[j])
                continue
            theta = G[j + 1] / (G[j + 1] - G[j])
            best = max(best, theta * V[j] + (1 - theta) * V[j + 1])
    return best, float(D.min())


# --- exact evaluation against the continuous law N(0, T) -------------------


def _normal_interval_moments(lo, hi, tau):
    """``E[Z^k; lo < Z < hi]`` for ``k = 0, 1, 2`` and ``Z ~ N(0, tau^2)``."""
    from scipy.special import ndtr

    a, b = lo / tau, hi / tau
    pa = 0.0 if math.isinf(a) else math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    pb = 0.0 if math.isinf(b) else math.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
    apa = 0.0 if math.isinf(a) else a * pa
    bpb = 0.0 if math.isinf(b) else b * pb
    # difference of upper tails is more accurate on the right half-line
    m0 = float(ndtr(-a) - ndtr(-b)) if a > 0 else float(ndtr(b) - ndtr(a))
    return m0, tau * (pa - pb), tau * tau * (m0 + apa - bpb)


def _node_pieces(lam, A, params: ModelParams, spec: PayoffSpec):
    """Per payoff piece, the optimal value and zeta as piecewise polynomials in z.

    Returns a list (one per payoff piece) of lists of
    ``(z_lo, z_hi, (p2, p1, p0), (q1, q0))`` with value ``p2 z^2 + p1 z + p0``
    and maximiser ``q1 z + q0`` on ``[z_lo, z_hi]``.
    """
    c = 1.0 / (2.0 * A * params.sigma ** 2)
    sig = params.sigma
    out = []
    for lo, hi, m, icpt in spec.pieces():
        lo, hi = lo - params.s0, hi - params.s0
        b = icpt + m * params.s0
        d = (m - lam) / (2.0 * c)
        za = (lo - d) / sig if math.isfinite(lo) else -math.inf
        ze = (hi - d) / sig if math.isfinite(hi) else math.inf
        parts = []

        def clamped(z0):
            return (-c * sig * sig, 2.0 * c * sig * z0, b + (m - lam) * z0 - c * z0 * z0), (0.0, z0)

        if math.isfinite(za):
            parts.append((-math.inf, za, *clamped(lo)))
        parts.append((za, ze, (0.0, (m - lam) * sig, b + (m - lam) ** 2 / (4.0 * c)), (sig, d)))
        if math.isfinite(ze):
            parts.append((ze, math.inf, *clamped(hi)))
        out.append(parts)
    return out


def _poly_at(parts, z):
    for lo, hi, p, q in parts:
        if lo <= z <= hi:
            return p, q
    raise AssertionError("z outside piece cover")


def _continuum_terms(lam, A, params: ModelParams, spec: PayoffSpec):
    """Exact ``(D(lam), G(lam))`` for the continuous Gaussian law."""
    pieces = _node_pieces(lam, A, params, spec)
    cuts = {p[0] for parts in pieces for p in parts} | {p[1] for parts in pieces for p in parts}
    cuts = sorted(x for x in cuts if math.isfinite(x))
    edges = [-math.inf, *cuts, math.inf]
    refined = []
    for lo, hi in zip(edges, edges[1:]):
        if not hi > lo:
            continue
        probe = 0.5 * (lo + hi) if math.isfinite(lo) and math.isfinite(hi) else (hi - 1.0 if math.isinf(lo) else lo + 1.0)
        polys = [_poly_at(parts, probe)[0] for parts in pieces]
        roots = [lo, hi]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                coef = np.subtract(polys[i], polys[j])
                if np.allclose(coef, 0.0, atol=1e-15):
                    continue
                for r in np.roots(coef) if abs(coef[0]) > 1e-300 else np.roots(coef[1:]):
                    if abs(r.imag) < 1e-12 and lo < r.real < hi:
                        roots.append(float(r.real))
        roots.sort()
        refined.extend(zip(roots, roots[1:]))
    D = 0.0
    G = 0.0
    tau = math.sqrt(params.T)
    for lo, hi in refined:
        if not hi > lo:
            continue
        probe = 0.5 * (lo + hi) if math.isfinite(lo) and math.isfinite(hi) else (hi - 1.0 if math.isinf(lo) else lo + 1.0)
        best = None
        for parts in pieces:
            p, q = _poly_at(parts, probe)
            val = p[0] * probe * probe + p[1] * probe + p[2]
            zeta = q[0] * probe + q[1]
            # ties: smallest zeta wins
            if best is None or val > best[0] or (val == best[0] and zeta < best[3]):
                best = (val, p, q, zeta)
        m0, m1, m2 = _normal_interval_moments(lo, hi, tau)
        _, p, q, _ = best
        D += p[0] * m2 + p[1] * m1 + p[2] * m0
        G += q[0] * m1 + q[1] * m0
    return D, G


def limit_value_continuum(A: float, params: ModelParams, spec: PayoffSpec, xtol: float = 1e-13):
    """Limit value against the exact Gaussian law (no quadrature).

    The pointwise optimum is piecewise quadratic in ``z`` with breakpoints
    from clamping and from crossings between payoff pieces, so every Gaussian
    integral is closed form.  Under the continuous law the constraint function
    is continuous in the multiplier, so bisection needs no randomisation.
    Returns ``(value, multiplier)``.
    """
    slopes = [0.0, *spec.slopes]
    lo, hi = min(slopes), max(slopes)
    if hi - lo == 0.0:
        D, G = _continuum_terms(0.0, A, params, spec)
        return D, 0.0
    for _ in range(200):
        if hi - lo <= xtol:
            break
        mid = 0.5 * (lo + hi)
        _, G = _continuum_terms(mid, A, params, spec)
        if G > 0:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    D, G = _continuum_terms(lam, A, params, spec)
    return D + lam * G, lam
