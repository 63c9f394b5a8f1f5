"""Monte Carlo for relaxed martingale measures built from a volatility policy.

Under the measure ``Q`` the process ``X`` is a Brownian motion, and the price
is recovered pathwise as

    S_t = s0 + sigma X_t + int_0^t (mu - sigma kappa_u(X)) du,
    kappa_t(x) = (mu - (f_j - sigma)/H * Phi(x_t - x_{max(t - H, t_j)})) / sigma   on [t_j, t_{j+1}),

with ``Phi`` the clamp to ``[-1, 1]`` and ``f_j`` the policy's volatility level
for segment ``j``, a function of path values observed by ``t_{j-1}``.  Because
``X`` is simulated directly no likelihood ratio is ever formed; the relative
entropy of ``Q`` with respect to the reference measure is ``E_Q[int kappa^2]/2``.

Over ``[0, t_1)`` the policy is the constant ``sigma`` (no drift correction).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .errors import GridMismatch, PolicyError, ResolutionTooCoarse
from .model_core import ModelParams, PayoffSpec, SeededStream

CHUNK = 500
TEST_FUNCTIONS = ("one", "sign", "clamp")


def clip_unit(z):
    return np.clip(z, -1.0, 1.0)


@dataclass(frozen=True)
class VolatilityPolicy:
    """Piecewise-constant-in-time volatility profile driven by the observed path.

    ``pieces[j - 1] = (x, nu)`` defines ``f_j`` as the clamped linear
    interpolant of ``nu`` over ``x`` evaluated at ``x_{t_{j-1}}``, for
    ``j = 1, ..., J - 1``.  ``history_fns`` optionally replaces these with
    callables mapping the observed values ``(x_{t_0}, ..., x_{t_{j-1}})`` (an
    array of shape ``(paths, j)``) to levels; their ``bound`` and
    ``lipschitz`` must then be declared.
    """

    partition: tuple
    pieces: tuple
    history_fns: tuple | None = field(default=None, compare=False)
    declared_bound: float | None = None
    declared_lipschitz: float | None = None

    def __post_init__(self):
        t = tuple(float(v) for v in self.partition)
        if len(t) < 2 or t[0] != 0.0 or any(b <= a for a, b in zip(t, t[1:])):
            raise PolicyError(f"partition must start at 0 and strictly increase: {t}")
        object.__setattr__(self, "partition", t)
        n_seg = len(t) - 2
        if self.history_fns is not None:
            if len(self.history_fns) != n_seg:
                raise PolicyError(f"need {n_seg} history functions, got {len(self.history_fns)}")
            if self.declared_bound is None or self.declared_lipschitz is None:
                raise PolicyError("history functions need a declared bound and Lipschitz constant")
            return
        pieces = []
        for xs, nus in self.pieces:
            xs = tuple(float(v) for v in xs)
            nus = tuple(float(v) for v in nus)
            if len(xs) == 0 or len(xs) != len(nus):
                raise PolicyError("each piece needs equally many x and nu values")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise PolicyError(f"piece abscissae must strictly increase: {xs}")
            if not all(math.isfinite(v) for v in xs + nus):
                raise PolicyError("piece data must be finite")
            pieces.append((xs, nus))
        if len(pieces) != n_seg:
            raise PolicyError(f"partition with {len(t) - 1} segments needs {n_seg} pieces, got {len(pieces)}")
        object.__setattr__(self, "pieces", tuple(pieces))

    @property
    def J(self) -> int:
        return len(self.partition) - 1

    @property
    def T(self) -> float:
        return self.partition[-1]

    @property
    def bound(self) -> float:
        if self.declared_bound is not None:
            return float(self.declared_bound)
        return max((max(abs(v) for v in nus) for _, nus in self.pieces), default=0.0)

    @property
    def lipschitz(self) -> float:
        if self.declared_lipschitz is not None:
            return float(self.declared_lipschitz)
        out = 0.0
        for xs, nus in self.pieces:
            for i in range(len(xs) - 1):
                out = max(out, abs(nus[i + 1] - nus[i]) / (xs[i + 1] - xs[i]))
        return out

    def level(self, j: int, observed, sigma: float):
        """Volatility on segment ``j`` given ``observed = x_{t_0..t_{j-1}}`` of shape ``(paths, j)``."""
        observed = np.atleast_2d(np.asarray(observed, float))
        if j == 0:
            return np.full(observed.shape[0], float(sigma))
        if self.history_fns is not None:
            return np.asarray(self.history_fns[j - 1](observed), float)
        xs, nus = self.pieces[j - 1]
        return np.interp(observed[:, -1], xs, nus)

    def validate_delay(self, H: float):
        """Each level must be known a full delay before its segment starts."""
        t = self.partition
        for j in range(1, self.J):
            if t[j - 1] > max(t[j] - H, 0.0) + 1e-12:
                raise PolicyError(f"t_{j - 1} = {t[j - 1]} exceeds (t_{j} - H)+ = {max(t[j] - H, 0.0)}")

    @classmethod
    def constant(cls, T: float, sigma: float) -> "VolatilityPolicy":
        return cls((0.0, T), ())

    @classmethod
    def two_level(cls, T: float, nu: float) -> "VolatilityPolicy":
        """``sigma`` on ``[0, T/2)`` and the constant ``nu`` on ``[T/2, T]``."""
        return cls((0.0, T / 2, T), (((0.0,), (float(nu),)),))

    @classmethod
    def from_dict(cls, d: dict) -> "VolatilityPolicy":
        try:
            return cls(tuple(d["partition"]), tuple((tuple(p["x"]), tuple(p["nu"])) for p in d["pieces"]))
        except (KeyError, TypeError) as exc:
            raise PolicyError(f"malformed policy: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "VolatilityPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"partition": list(self.partition), "pieces": [{"x": list(x), "nu": list(n)} for x, n in self.pieces]}


@dataclass(frozen=True)
class PathEnsemble:
    params: ModelParams
    policy: VolatilityPolicy
    H: float
    delta: float
    seed: int
    times: np.ndarray  # recorded times
    X: np.ndarray  # (paths, len(times))
    S: np.ndarray
    kappa_sq: np.ndarray  # int_0^T kappa^2 dt per path
    increment_mean: float
    increment_var: float
    level_means: tuple  # mean policy level per segment
    clamp_offset: float = 0.0

    @property
    def paths(self) -> int:
        return len(self.kappa_sq)

    def column(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise GridMismatch(f"time {t} was not recorded")
        return k

    def at(self, t: float):
        k = self.column(t)
        return self.X[:, k], self.S[:, k]


@dataclass(frozen=True)
class MartingaleStat:
    s: float
    t: float
    test: str
    statistic: float
    stderr: float

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.statistic == 0 else math.copysign(math.inf, self.statistic)
        return self.statistic / self.stderr


@dataclass(frozen=True)
class DualReport:
    entropy: float
    entropy_stderr: float
    scaled_entropy: float
    martingale_stats: tuple
    weak_duality_bound: float
    weak_duality_stderr: float
    entropy_lower_bound_pairs: tuple  # (M, lhs, lhs_se, rhs, rhs_se)

    def to_dict(self) -> dict:
        return {
            "entropy": self.entropy,
            "entropy_stderr": self.entropy_stderr,
            "scaled_entropy": self.scaled_entropy,
            "weak_duality_bound": self.weak_duality_bound,
            "weak_duality_stderr": self.weak_duality_stderr,
            "entropy_lower_bound": [
                {"M": m, "lhs": a, "lhs_stderr": b, "rhs": c, "rhs_stderr": d}
                for m, a, b, c, d in self.entropy_lower_bound_pairs
            ],
            "martingale_stats": [
                {"s": m.s, "t": m.t, "test": m.test, "statistic": m.statistic, "stderr": m.stderr}
                for m in self.martingale_stats
            ],
        }


# --- drift ---------------------------------------------------------------------------


def drift_kappa(x, t: float, policy: VolatilityPolicy, H: float, params: ModelParams, times=None, clamp_offset=0.0):
    """Drift coefficient ``kappa_t`` of a single path.

    ``x`` holds the path on ``times`` (default: uniform grid over ``[0, T]``);
    off-grid values are linearly interpolated.
    """
    x = np.asarray(x, float)
    if times is None:
        times = np.linspace(0.0, params.T, len(x))
    part = policy.partition
    j = int(np.searchsorted(part, t, side="right")) - 1
    j = min(j, policy.J - 1)
    if j == 0:
        return params.mu / params.sigma
    observed = np.interp(part[:j], times, x)[None, :]
    lev = float(policy.level(j, observed, params.sigma)[0])
    lag = max(t - H, part[j])
    z = float(np.interp(t, times, x) - np.interp(lag, times, x))
    return (params.mu - (lev - params.sigma) / H * (clip_unit(z) + clamp_offset)) / params.sigma


def _grid_index(t: float, delta: float, what: str) -> int:
    k = round(t / delta)
    if abs(k * delta - t) > 1e-9 * max(1.0, abs(t)):
        raise ResolutionTooCoarse(f"{what} = {t} is not a multiple of the step {delta}")
    return int(k)


def _record_times(policy: VolatilityPolicy, H: float, extra=()):
    pts = set(policy.partition)
    pts.update(max(t - H, 0.0) for t in policy.partition)
    pts.update(float(v) for v in extra)
    return np.array(sorted(pts))


def _simulate_chunk(stream, count, n, delta, h, seg_idx, obs_idx, rec_idx, policy, params, H, offset):
    sigma, mu = params.sigma, params.mu
    dX = stream.generator().normal(0.0, math.sqrt(delta), size=(count, n))
    X = np.zeros((count, n + 1))
    np.cumsum(dX, axis=1, out=X[:, 1:])
    # per-cell integrals of the drift correction and of kappa^2
    drift = np.zeros((count, n))
    ksq = np.full((count, n), (mu / sigma) ** 2 * delta)
    lev_sum = []
    for j in range(1, policy.J):
        a, b = seg_idx[j], seg_idx[j + 1]
        lev = policy.level(j, X[:, obs_idx[:j]], sigma)
        lev_sum.append(float(lev.sum()))
        k = np.arange(a, b + 1)
        lag = np.maximum(k - h, a)
        phi = clip_unit(X[:, k] - X[:, lag]) + offset
        kap = (mu - ((lev - sigma) / H)[:, None] * phi) / sigma
        g = mu - sigma * kap
        drift[:, a:b] = 0.5 * delta * (g[:, :-1] + g[:, 1:])
        ksq[:, a:b] = 0.5 * delta * (kap[:, :-1] ** 2 + kap[:, 1:] ** 2)
    D = np.zeros((count, n + 1))
    np.cumsum(drift, axis=1, out=D[:, 1:])
    Xr = X[:, rec_idx]
    Sr = params.s0 + sigma * Xr + D[:, rec_idx]
    return Xr, Sr, ksq.sum(axis=1), float(dX.sum()), float((dX * dX).sum()), lev_sum


def simulate_paths(
    policy: VolatilityPolicy,
    H: float,
    params: ModelParams,
    delta: float | None = None,
    P: int = 20_000,
    seed: int = 0,
    clamp_offset: float = 0.0,
    record_times=(),
    threads: int = 1,
) -> PathEnsemble:
    """Simulate ``P`` paths of ``(X, S)`` under the relaxed measure for delay ``H``.

    ``clamp_offset`` shifts the clamp (``Phi + offset``); nonzero values break
    the martingale symmetry and serve as a negative control.
    """
    if abs(policy.T - params.T) > 1e-12:
        raise PolicyError(f"policy horizon {policy.T} differs from T = {params.T}")
    if not H > 0:
        raise ValueError(f"H must be > 0, got {H}")
    if delta is None:
        delta = H / 20
    if delta > H / 10 + 1e-15:
        raise ResolutionTooCoarse(f"step {delta} must be <= H/10 = {H / 10}")
    if P < 1000:
        raise ValueError(f"need at least 1000 paths, got {P}")
    policy.validate_delay(H)
    n = _grid_index(params.T, delta, "T")
    h = _grid_index(H, delta, "H")
    seg_idx = [_grid_index(t, delta, "partition point") for t in policy.partition]
    obs_idx = np.array(seg_idx[:-1])
    times = _record_times(policy, H, record_times)
    rec_idx = np.array([_grid_index(t, delta, "record time") for t in times])
    times = rec_idx * delta

    counts = [min(CHUNK, P - i) for i in range(0, P, CHUNK)]
    root = SeededStream(seed)

    def run(c):
        return _simulate_chunk(root.substream(c), counts[c], n, delta, h, seg_idx, obs_idx, rec_idx, policy, params, H, clamp_offset)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(counts))))
    else:
        parts = [run(c) for c in range(len(counts))]
    X = np.concatenate([p[0] for p in parts])
    S = np.concatenate([p[1] for p in parts])
    ksq = np.concatenate([p[2] for p in parts])
    m = float(sum(p[3] for p in parts)) / (P * n)
    v = float(sum(p[4] for p in parts)) / (P * n) - m * m
    level_means = tuple(sum(p[5][j] for p in parts) / P for j in range(policy.J - 1))
    return PathEnsemble(params, policy, H, delta, seed, times, X, S, ksq, m, v, level_means, clamp_offset)


# --- estimators -----------------------------------------------------------------------


def _mean_se(v):
    v = np.asarray(v, float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def entropy_estimate(ens: PathEnsemble):
    """``(value, stderr)`` of the relative entropy ``E_Q[int kappa^2] / 2``."""
    val, se = _mean_se(0.5 * ens.kappa_sq)
    return max(val, 0.0), se


def scaled_entropy_limit(policy: VolatilityPolicy, params: ModelParams) -> float:
    """``E int (nu - sigma)^2 dt / (2 sigma^2)`` for a policy with path-independent levels."""
    t = policy.partition
    out = 0.0
    for j in range(1, policy.J):
        lev = float(policy.level(j, np.zeros((1, j)), params.sigma)[0])
        out += (lev - params.sigma) ** 2 * (t[j + 1] - t[j])
    return out / (2 * params.sigma ** 2)


def _test_value(name: str, x):
    if name == "one":
        return np.ones_like(x)
    if name == "sign":
        return np.sign(x)
    if name == "clamp":
        return clip_unit(x)
    raise ValueError(f"unknown test function {name!r}")


def default_pairs(ens: PathEnsemble):
    t = ens.policy.partition
    pairs = [(t[j], t[j + 1]) for j in range(len(t) - 1)]
    if len(t) > 2:
        pairs.append((t[0], t[-1]))
    return pairs


def relaxed_martingale_test(ens: PathEnsemble, pairs=None, tests=TEST_FUNCTIONS):
    """Sample means of ``(S_t - S_s) h`` with ``h`` a function of ``X`` observed by ``(s - H)+``."""
    pairs = default_pairs(ens) if pairs is None else pairs
    out = []
    for s, t in pairs:
        _, Ss = ens.at(s)
        _, St = ens.at(t)
        cutoff = max(s - ens.H, 0.0)
        k = int(np.searchsorted(ens.times, cutoff + 1e-12, side="right")) - 1
        obs = ens.X[:, k]
        for name in tests:
            stat, se = _mean_se((St - Ss) * _test_value(name, obs))
            out.append(MartingaleStat(float(s), float(t), name, stat, se))
    return out


def predicted_control_drift(ens: PathEnsemble, s: float, t: float) -> float:
    """Expected ``S_t - S_s`` under the shifted clamp, from 1D Gaussian quadrature.

    Each unit of time in segment ``j`` contributes ``(f_j - sigma)/H`` times
    ``E[Phi(Z) + offset]`` with ``Z`` the windowed Brownian increment.
    """
    part, H, off = ens.policy.partition, ens.H, ens.clamp_offset
    total = 0.0
    for j in range(1, ens.policy.J):
        a, b = max(s, part[j]), min(t, part[j + 1])
        if b <= a:
            continue

        def mean_phi(u):
            v = min(u - part[j], H)
            if v <= 0:
                return off
            sd = math.sqrt(v)
            val, _ = integrate.quad(lambda z: (clip_unit(z) + off) * stats.norm.pdf(z, scale=sd), -12 * sd, 12 * sd, points=[-1.0, 1.0] if sd > 1 / 12 else None)
            return val

        val, _ = integrate.quad(mean_phi, a, b, points=[min(max(part[j] + H, a), b)], limit=200)
        total += (ens.level_means[j - 1] - ens.params.sigma) / H * val
    return total


def weak_duality_bound(ens: PathEnsemble, A: float, spec: PayoffSpec):
    """``E_Q f(S_T) - (H/A) * entropy``, a lower bound for the delayed price at ``lam = A/H``."""
    _, ST = ens.at(ens.params.T)
    return _mean_se(spec(ST) - ens.H / A * 0.5 * ens.kappa_sq)


def entropy_lower_bound_check(ens: PathEnsemble, M: int):
    """Both sides of the entropy lower bound over the grid of mesh ``H/M``.

    Returns ``(lhs, lhs_se, rhs, rhs_se)``.
    """
    mesh = ens.H / M
    steps = ens.params.T / mesh
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise GridMismatch(f"T / (H/M) = {steps} is not an integer")
    ratio = mesh / ens.delta
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise GridMismatch(f"step {ens.delta} does not divide H/M = {mesh}")
    t_last = round(steps) * mesh
    X, S = ens.at(t_last)
    sig = ens.params.sigma
    lhs, lhs_se = entropy_estimate(ens)
    r = (S - ens.params.s0 - sig * X) ** 2 / (2 * sig ** 2 * ens.H) * M / (M + 1)
    rhs, rhs_se = _mean_se(r)
    return lhs, lhs_se, rhs, rhs_se


def reference_terminal(ens: PathEnsemble, coupled: bool = True, seed: int | None = None):
    """Samples of ``s0 + int nu dW`` for the ensemble's policy.

    With ``coupled`` the ensemble's own ``X`` plays the role of ``W`` at the
    partition points, so the comparison isolates the error of the
    construction from sampling noise.  Otherwise an independent Brownian
    sample of equal size is drawn.
    """
    pol, p = ens.policy, ens.params
    t = np.array(pol.partition)
    if coupled:
        W = np.stack([ens.at(v)[0] for v in t], axis=1)
    else:
        rng = SeededStream(ens.seed if seed is None else seed, 1).generator()
        dW = rng.normal(0.0, 1.0, size=(ens.paths, len(t) - 1)) * np.sqrt(np.diff(t))
        W = np.concatenate([np.zeros((ens.paths, 1)), np.cumsum(dW, axis=1)], axis=1)
    out = np.full(ens.paths, p.s0)
    for j in range(pol.J):
        out = out + pol.level(j, W[:, :j] if j else np.zeros((ens.paths, 1)), p.sigma) * (W[:, j + 1] - W[:, j])
    return out


def terminal_law_distance(ens: PathEnsemble, reference=None, coupled: bool = True):
    """Two-sample Kolmogorov-Smirnov statistic between ``S_T`` and the reference law."""
    _, ST = ens.at(ens.params.T)
    ref = reference_terminal(ens, coupled) if reference is None else np.asarray(reference, float)
    return float(stats.ks_2samp(ST, ref, method="asymp").statistic)


def ks_critical(n: int, m: int | None = None, c_alpha: float = 1.63) -> float:
    """Two-sample KS critical value at the 1% level."""
    m = n if m is None else m
    return c_alpha * math.sqrt((n + m) / (n * m))


def dual_report(ens: PathEnsemble, A: float, spec: PayoffSpec, M_list=(1, 2, 5)) -> DualReport:
    ent, ent_se = entropy_estimate(ens)
    wd, wd_se = weak_duality_bound(ens, A, spec)
    pairs = []
    for M in M_list:
        try:
            pairs.append((int(M),) + entropy_lower_bound_check(ens, M))
        except GridMismatch:
            continue  # this M does not fit the simulated grid
    return DualReport(ent, ent_se, ens.H * ent, tuple(relaxed_martingale_test(ens)), wd, wd_se, tuple(pairs))
