"""Exponential-utility indifference prices with one-period information delay.

Trading happens on the uniform grid ``t_i = i T/N``; the position held over
``(t_{i-1}, t_i]`` may only use prices up to ``t_{i-2}`` (delay ``H = T/N``),
so the first two positions are deterministic.

Backward recursion
------------------
Write ``Z ~ N(mu dt, sigma^2 dt)`` for a price increment.  The stage-``j``
value, as a function of the latest observed price ``s`` and the position ``g``
already committed to the next (unseen) increment, is

    V_j(s, g) = min_c E[ exp(-lam g Z) V_{j+1}(s + Z, c) ],
    V_{N+1}(s, g) = E[ exp(-lam (g Z - f(s + Z))) ].

Tilting the Gaussian by ``exp(-lam g Z)`` shifts its mean, which gives the
exact factorisation

    log V_j(s, g) = q(g) + U_j(s + m(g)),
    m(c) = mu dt - lam c sigma^2 dt,   q(c) = -lam c mu dt + lam^2 c^2 sigma^2 dt / 2,

with a one-dimensional profile ``U_j`` obeying

    U_j(y) = min_c [ q(c) + (C U_{j+1})(y + m(c)) ],
    (C U)(x) = log E[ exp U(x + sigma sqrt(dt) xi) ],   xi ~ N(0, 1).

So each stage is a Gaussian log-convolution followed by a quadratic
inf-convolution over the next position.  Profiles live on a uniform grid in
``y``, are interpolated with monotone cubics on log-values, the convolution
uses Gauss-Hermite nodes, and the position search is a coarse scan over the
position grid refined by golden section on the bracketing cell.  The terminal
profile and the first convolution are closed form for piecewise-linear
payoffs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar
from scipy.special import log_ndtr, logsumexp

from .errors import ExtrapolationWarning, OverflowGuard
from .model_core import ModelParams, PayoffSpec, gauss_quadrature, golden_section_min, constant_payoff

EXP_LIMIT = 700.0
CLAMP_WARN = 1e-3


@dataclass(frozen=True)
class DelayedProblem:
    params: ModelParams
    spec: PayoffSpec
    N: int
    lam: float
    delay_periods: int = 1

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.delay_periods != 1:
            raise NotImplementedError("only a one-period delay is supported")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def dt(self) -> float:
        return self.params.T / self.N

    @property
    def H(self) -> float:
        return self.dt * self.delay_periods

    def shift(self, c):
        """Mean of the increment after tilting by ``exp(-lam c Z)``."""
        p = self.params
        return p.mu * self.dt - self.lam * np.asarray(c) * p.sigma ** 2 * self.dt

    def log_tilt(self, c):
        """``log E[exp(-lam c Z)]`` for one increment."""
        p = self.params
        c = np.asarray(c)
        return -self.lam * c * p.mu * self.dt + 0.5 * (self.lam * c * p.sigma) ** 2 * self.dt


@dataclass(frozen=True)
class DPGrid:
    """Discretisation knobs; ``s_nodes`` spans ``s0 +- 6 sigma sqrt(T)``."""

    s_nodes: int = 1201
    g_nodes: int = 81
    quad_nodes: int = 64
    s_width: float = 6.0
    g_width: float = 4.0
    golden_tol: float = 1e-10


@dataclass(frozen=True)
class ValueGrid:
    """Stage value ``V_j`` on (observed price, committed position) nodes.

    The table is derived from the reduced profile ``U_j`` on ``y_nodes``; both
    are kept so a stage can be inspected in the original coordinates and fed
    to the next backward step.  ``log_values`` holds ``log V_j``.
    """

    stage: int
    s_nodes: np.ndarray
    g_nodes: np.ndarray
    y_nodes: np.ndarray
    u_values: np.ndarray
    problem: DelayedProblem = field(repr=False)
    # (C U_j) on y_nodes when known in closed form
    smoothed: np.ndarray | None = field(default=None, repr=False)
    clamped_mass: float = 0.0

    def profile(self, y):
        return _interp(self.y_nodes, self.u_values)(y)

    def log_value(self, s, g):
        s, g = np.broadcast_arrays(np.asarray(s, float), np.asarray(g, float))
        return self.problem.log_tilt(g) + self.profile(s + self.problem.shift(g))

    @property
    def log_values(self) -> np.ndarray:
        return self.log_value(self.s_nodes[:, None], self.g_nodes[None, :])

    @property
    def values(self) -> np.ndarray:
        lv = self.log_values
        if lv.max() > EXP_LIMIT:
            i, k = np.unravel_index(np.argmax(lv), lv.shape)
            raise OverflowGuard("stage value exceeds exp(700); use log_values", (self.s_nodes[i], self.g_nodes[k]))
        return np.exp(lv)


@dataclass(frozen=True)
class PriceReport:
    numerator_log: float
    denominator_log: float
    price: float
    diagnostics: dict = field(default_factory=dict)


class _Clamped:
    """Monotone cubic interpolant held constant outside the node range."""

    def __init__(self, x, y):
        self.lo, self.hi = x[0], x[-1]
        # flat stretches make the harmonic slope mean overflow harmlessly to a zero slope
        with np.errstate(over="ignore", divide="ignore"):
            self.f = PchipInterpolator(x, y, extrapolate=False)

    def __call__(self, q):
        return self.f(np.clip(q, self.lo, self.hi))


def _interp(x, y):
    return _Clamped(np.asarray(x), np.asarray(y))


# --- closed forms --------------------------------------------------------------


def _log_diff_ndtr(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a < b`` elementwise, stable in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    right = a > 0
    hi = np.where(right, log_ndtr(-a), log_ndtr(b))
    lo = np.where(right, log_ndtr(-b), log_ndtr(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hi + np.log1p(-np.exp(lo - hi))
    return np.where(b > a, out, -np.inf)


def log_gauss_payoff_transform(x, scale: float, var: float, spec: PayoffSpec):
    """Exact ``log E[exp(scale f(x + Y))]`` for ``Y ~ N(0, var)``.

    On each linear piece the integrand is the exponential of an affine map, so
    the expectation is a sum of truncated Gaussian moment generating values.
    """
    x = np.asarray(x, float)
    sd = math.sqrt(var)
    terms = []
    for lo, hi, m, b in spec.pieces():
        a = scale * m  # exponent slope in Y
        shift = a * var
        lo_z = (lo - x - shift) / sd if math.isfinite(lo) else np.full_like(x, -np.inf)
        hi_z = (hi - x - shift) / sd if math.isfinite(hi) else np.full_like(x, np.inf)
        terms.append(scale * (b + m * x) + 0.5 * a * a * var + _log_diff_ndtr(lo_z, hi_z))
    return logsumexp(np.stack(terms), axis=0)


def denominator_log(params: ModelParams) -> float:
    return -params.mu ** 2 * params.T / (2.0 * params.sigma ** 2)


def denominator_value(params: ModelParams, lam: float | None = None) -> float:
    """Optimal ``E[exp(-lam V)]`` without a claim; independent of ``lam`` and delay."""
    return math.exp(denominator_log(params))


def denominator_numeric(params: ModelParams, lam: float, nodes: int = 64) -> float:
    """Minimise ``E[exp(-lam gamma (S_T - s0))]`` over constant ``gamma`` numerically.

    Expectation by Gauss-Hermite, minimisation by coarse scan plus golden
    section, so nothing here borrows the closed form.
    """
    quad = gauss_quadrature(nodes, params.mu * params.T, params.sigma ** 2 * params.T)
    scale = (1.0 + abs(params.mu) * math.sqrt(params.T) / params.sigma) / (lam * params.sigma * math.sqrt(params.T))
    grid = np.linspace(-20 * scale, 20 * scale, 401)

    def obj(gam):
        gam = np.asarray(gam, float)
        return logsumexp(np.log(quad.weights) - lam * gam[..., None] * quad.nodes, axis=-1)

    k = int(np.argmin(obj(grid)))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    _, fx = golden_section_min(obj, np.array([lo]), np.array([hi]), tol=1e-14)
    return math.exp(float(fx[0]))


def terminal_log_value(s, g, problem: DelayedProblem):
    """``log V_{N+1}(s, g) = log E[exp(-lam (g Z - f(s + Z)))]``, exact."""
    p = problem.params
    s, g = np.broadcast_arrays(np.asarray(s, float), np.asarray(g, float))
    smooth = log_gauss_payoff_transform(s + problem.shift(g), problem.lam, p.sigma ** 2 * problem.dt, problem.spec)
    return problem.log_tilt(g) + smooth


def terminal_value(s, g, problem: DelayedProblem):
    lv = terminal_log_value(s, g, problem)
    if np.max(lv) > EXP_LIMIT:
        idx = np.unravel_index(np.argmax(lv), np.shape(lv)) if np.ndim(lv) else ()
        node = (np.asarray(s)[idx] if np.ndim(s) else s, np.asarray(g)[idx] if np.ndim(g) else g)
        raise OverflowGuard(f"terminal exponent {np.max(lv):.1f} exceeds {EXP_LIMIT}", node)
    out = np.exp(lv)
    return float(out) if np.ndim(out) == 0 else out


# --- grids and stage operators ---------------------------------------------------


def _axes(problem: DelayedProblem, grid: DPGrid):
    p = problem.params
    half = grid.s_width * p.sigma * math.sqrt(p.T)
    s_nodes = np.linspace(p.s0 - half, p.s0 + half, grid.s_nodes)
    centre = p.mu / (problem.lam * p.sigma ** 2)
    g_half = grid.g_width * max(problem.spec.lipschitz, 1.0)
    g_nodes = np.linspace(centre - g_half, centre + g_half, grid.g_nodes)
    reach = float(np.max(np.abs(problem.shift(g_nodes))))
    h = s_nodes[1] - s_nodes[0]
    extra = int(math.ceil(reach / h)) + 1
    y_nodes = p.s0 + h * np.arange(-(grid.s_nodes // 2) - extra, grid.s_nodes // 2 + extra + 1)
    core = np.abs(y_nodes - p.s0) <= half + 1e-12
    return s_nodes, g_nodes, y_nodes, core


def _convolve(y_nodes, u, problem: DelayedProblem, grid: DPGrid, core):
    """``(C U)(y) = log E[exp U(y + sigma sqrt(dt) xi)]`` on the grid, plus clamped mass."""
    quad = gauss_quadrature(grid.quad_nodes, 0.0, problem.params.sigma ** 2 * problem.dt)
    pts = y_nodes[:, None] + quad.nodes[None, :]
    out = logsumexp(np.log(quad.weights)[None, :] + _interp(y_nodes, u)(pts), axis=1)
    outside = (pts < y_nodes[0]) | (pts > y_nodes[-1])
    clamped = float(np.max((outside * quad.weights[None, :]).sum(axis=1)[core], initial=0.0))
    return out, clamped


def _hedge_min(y, cu_fn, g_nodes, problem: DelayedProblem, tol):
    """``min_c [q(c) + CU(y + m(c))]`` for each ``y``: coarse scan then golden section.

    Returns ``(value, argmin)``.
    """
    y = np.atleast_1d(np.asarray(y, float))
    coarse = problem.log_tilt(g_nodes)[None, :] + cu_fn(y[:, None] + problem.shift(g_nodes)[None, :])
    k = np.argmin(coarse, axis=1)
    lo = g_nodes[np.maximum(k - 1, 0)]
    hi = g_nodes[np.minimum(k + 1, len(g_nodes) - 1)]

    def obj(c):
        return problem.log_tilt(c) + cu_fn(y + problem.shift(c))

    c_opt, val = golden_section_min(obj, lo, hi, tol=tol)
    # never return worse than the coarse scan
    coarse_min = coarse[np.arange(len(y)), k]
    better = coarse_min < val
    return np.where(better, coarse_min, val), np.where(better, g_nodes[k], c_opt)


def terminal_grid(problem: DelayedProblem, grid: DPGrid = DPGrid()) -> ValueGrid:
    p = problem.params
    s_nodes, g_nodes, y_nodes, _ = _axes(problem, grid)
    var = p.sigma ** 2 * problem.dt
    u = log_gauss_payoff_transform(y_nodes, problem.lam, var, problem.spec)
    cu = log_gauss_payoff_transform(y_nodes, problem.lam, 2.0 * var, problem.spec)
    return ValueGrid(problem.N + 1, s_nodes, g_nodes, y_nodes, u, problem, smoothed=cu)


def backward_step(v_next: ValueGrid, problem: DelayedProblem, grid: DPGrid = DPGrid()) -> ValueGrid:
    """One stage of the delayed recursion: ``V_j`` from ``V_{j+1}``."""
    y = v_next.y_nodes
    core = np.abs(y - problem.params.s0) <= grid.s_width * problem.params.sigma * math.sqrt(problem.params.T) + 1e-12
    if v_next.smoothed is not None:
        cu, clamped = v_next.smoothed, 0.0
    else:
        cu, clamped = _convolve(y, v_next.u_values, problem, grid, core)
    u, _ = _hedge_min(y, _interp(y, cu), v_next.g_nodes, problem, grid.golden_tol)
    if clamped > CLAMP_WARN:
        warnings.warn(f"stage {v_next.stage - 1}: {clamped:.2e} of quadrature mass clamped", ExtrapolationWarning)
    return ValueGrid(v_next.stage - 1, v_next.s_nodes, v_next.g_nodes, y, u, problem, clamped_mass=clamped)


def indifference_price_dp(problem: DelayedProblem, grid: DPGrid = DPGrid(), keep_stages: bool = False) -> PriceReport:
    """Indifference price with one-period delay by backward induction.

    Stages ``N+1`` down to ``3`` produce ``V_3``; the two deterministic initial
    positions are then found by nested searches (``gamma_2`` for every
    candidate price after the first increment, ``gamma_1`` at ``s0``).
    """
    p = problem.params
    v = terminal_grid(problem, grid)
    stages = [v]
    clamped = 0.0
    for _ in range(problem.N - 2):
        v = backward_step(v, problem, grid)
        clamped = max(clamped, v.clamped_mass)
        stages.append(v)
    y = v.y_nodes
    core = np.abs(y - p.s0) <= grid.s_width * p.sigma * math.sqrt(p.T) + 1e-12
    if v.smoothed is not None:
        cu = v.smoothed
    else:
        cu, c2 = _convolve(y, v.u_values, problem, grid, core)
        clamped = max(clamped, c2)
    u2, _ = _hedge_min(y, _interp(y, cu), v.g_nodes, problem, grid.golden_tol)
    numer, gamma1 = _hedge_min(np.array([p.s0]), _interp(y, u2), v.g_nodes, problem, grid.golden_tol)
    _, gamma2 = _hedge_min(p.s0 + problem.shift(gamma1), _interp(y, cu), v.g_nodes, problem, grid.golden_tol)
    numer_log = float(numer[0])
    denom_log = denominator_log(p)
    if clamped > CLAMP_WARN:
        warnings.warn(f"{clamped:.2e} of quadrature mass clamped", ExtrapolationWarning)
    diag = {
        "gamma1": float(gamma1[0]),
        "gamma2": float(gamma2[0]),
        "s_range": [float(v.s_nodes[0]), float(v.s_nodes[-1])],
        "g_range": [float(v.g_nodes[0]), float(v.g_nodes[-1])],
        "y_nodes": int(len(y)),
        "quad_nodes": grid.quad_nodes,
        "clamped_mass": clamped,
    }
    if keep_stages:
        diag["stages"] = stages
    return PriceReport(numer_log, denom_log, (numer_log - denom_log) / problem.lam, diag)


def indifference_price_nodelay(problem: DelayedProblem, grid: DPGrid = DPGrid()) -> PriceReport:
    """Same market without delay: ``gamma_i`` may use prices up to ``t_{i-1}``.

    Diagnostic reference; here ``U_{i} = HL(C U_{i+1})`` starting from
    ``U_{N+1} = lam f``, and the price is read off ``U_1(s0)``.
    """
    p = problem.params
    s_nodes, g_nodes, y, core = _axes(problem, grid)
    cu = log_gauss_payoff_transform(y, problem.lam, p.sigma ** 2 * problem.dt, problem.spec)
    for _ in range(problem.N - 1):
        u, _ = _hedge_min(y, _interp(y, cu), g_nodes, problem, grid.golden_tol)
        cu, _ = _convolve(y, u, problem, grid, core)
    numer, _ = _hedge_min(np.array([p.s0]), _interp(y, cu), g_nodes, problem, grid.golden_tol)
    numer_log = float(numer[0])
    denom_log = denominator_log(p)
    return PriceReport(numer_log, denom_log, (numer_log - denom_log) / problem.lam, {"mode": "no-delay"})


# --- exact optimisation on a discrete increment law ------------------------------


def _discrete_law(problem: DelayedProblem, q: int):
    p = problem.params
    quad = gauss_quadrature(q, p.mu * problem.dt, p.sigma ** 2 * problem.dt)
    return np.asarray(quad.nodes), np.log(quad.weights)


def _tree_log_numerator_dp(problem: DelayedProblem, spec: PayoffSpec, z, logp):
    lam, N = problem.lam, problem.N

    def brent(fn):
        res = minimize_scalar(fn, bracket=(-1.0, 1.0), method="brent", tol=1e-13)
        return float(res.fun), float(res.x)

    def log_v(j, s, g):
        # s: price at t_{j-2}; g: position on the next increment
        if j == N + 1:
            return float(logsumexp(logp - lam * g * z + lam * spec(s + z)))
        best, _ = brent(lambda c: float(logsumexp(logp - lam * g * z + np.array([log_v(j + 1, s + zk, c) for zk in z]))))
        return best

    s0 = problem.params.s0

    def after_gamma2(g2):
        nxt = np.array([log_v(3, s0 + zk, g2) for zk in z])
        inner, _ = brent(lambda g1: float(logsumexp(logp - lam * g1 * z + nxt)))
        return inner

    return brent(after_gamma2)[0]


def indifference_price_tree_dp(problem: DelayedProblem, q: int = 3) -> float:
    """Backward induction on a ``q``-point increment law (exact states, no grids)."""
    if problem.N > 3:
        raise ValueError("tree computations are limited to N <= 3")
    z, logp = _discrete_law(problem, q)
    num = _tree_log_numerator_dp(problem, problem.spec, z, logp)
    den = _tree_log_numerator_dp(problem, constant_payoff(0.0), z, logp)
    return (num - den) / problem.lam


def _tree_log_numerator_oracle(problem: DelayedProblem, spec: PayoffSpec, z, logp):
    """Joint minimisation over one position per information set.

    ``gamma_1, gamma_2`` are constants and ``gamma_i`` (``i >= 3``) is indexed
    by the first ``i - 2`` increments.  The objective is the log of a sum of
    exponentials of affine functions of the positions, hence convex; Newton's
    method with backtracking solves it to machine precision.
    """
    import itertools

    N, lam, q = problem.N, problem.lam, len(z)
    paths = list(itertools.product(range(q), repeat=N))
    var_index = {}

    def var(i, path):
        key = (i, tuple(path[: max(i - 2, 0)]))
        return var_index.setdefault(key, len(var_index))

    rows = [[(var(i, path), z[path[i - 1]]) for i in range(1, N + 1)] for path in paths]
    B = np.zeros((len(paths), len(var_index)))
    for r, entries in enumerate(rows):
        for k, zi in entries:
            B[r, k] += zi
    logw = np.array([sum(logp[k] for k in path) for path in paths])
    sT = problem.params.s0 + np.array([sum(z[k] for k in path) for path in paths])
    base = logw + lam * spec(sT)

    def parts(x):
        e = base - lam * (B @ x)
        val = logsumexp(e)
        pi = np.exp(e - val)
        grad = -lam * (B.T @ pi)
        Bp = B.T * pi
        hess = lam * lam * (Bp @ B - np.outer(B.T @ pi, B.T @ pi))
        return val, grad, hess

    x = np.zeros(B.shape[1])
    val, grad, hess = parts(x)
    for _ in range(200):
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        t = 1.0
        while True:
            nv = parts(x + t * step)[0]
            if nv <= val + 1e-4 * t * float(grad @ step) or t < 1e-12:
                break
            t *= 0.5
        x = x + t * step
        new_val, grad, hess = parts(x)
        done = abs(val - new_val) < 1e-15 and np.max(np.abs(grad)) < 1e-12
        val = new_val
        if done:
            break
    return float(val)


def indifference_price_tree_oracle(problem: DelayedProblem, q: int = 3) -> float:
    if problem.N > 3:
        raise ValueError("exhaustive enumeration is limited to N <= 3")
    z, logp = _discrete_law(problem, q)
    num = _tree_log_numerator_oracle(problem, problem.spec, z, logp)
    den = _tree_log_numerator_oracle(problem, constant_payoff(0.0), z, logp)
    return (num - den) / problem.lam


# --- scaling study -----------------------------------------------------------------


def convergence_study(A: float, spec: PayoffSpec, params: ModelParams, N_list, grid: DPGrid = DPGrid()):
    """Prices at ``lam = A N / T`` along ``N_list`` against the continuum limit value.

    Returns a list of dict rows with keys ``N, H, lambda, price, limit_value, gap``.
    """
    from .limit_solver import limit_value_continuum

    limit, _ = limit_value_continuum(A, params, spec)
    rows = []
    for N in N_list:
        H = params.T / N
        lam = A / H
        rep = indifference_price_dp(DelayedProblem(params, spec, N, lam), grid)
        rows.append({"N": int(N), "H": H, "lambda": lam, "price": rep.price, "limit_value": limit, "gap": rep.price - limit})
    return rows
