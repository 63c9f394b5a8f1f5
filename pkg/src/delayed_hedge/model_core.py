"""Shared building blocks: model parameters, payoffs, Gaussian quadrature, RNG streams.

Everything here is immutable after construction so it can be handed to
worker threads without copying.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateVariance,
    DiscontinuousTail,
    NegativeValue,
    NonMonotoneBreakpoints,
    PayoffError,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    """Bachelier dynamics ``S_t = s0 + sigma W_t + mu t`` on ``[0, T]``."""

    s0: float
    sigma: float
    mu: float
    T: float

    def __post_init__(self):
        for name in ("s0", "sigma", "mu", "T"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.T <= 0:
            raise ValueError(f"T must be > 0, got {self.T}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        try:
            return cls(s0=d["s0"], sigma=d["sigma"], mu=d["mu"], T=d["T"])
        except KeyError as exc:
            raise ValueError(f"missing model parameter {exc}") from None

    @classmethod
    def from_json(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"s0": self.s0, "sigma": self.sigma, "mu": self.mu, "T": self.T}


@dataclass(frozen=True)
class PayoffSpec:
    """Bounded, continuous, nonnegative piecewise-linear payoff.

    The payoff interpolates linearly between ``breakpoints`` and is constant
    outside them (``left_tail_value`` / ``right_tail_value``).  Construction
    validates the invariants, so every instance in circulation is usable.
    Bounded payoffs satisfy the growth bound ``f(x) <= C (1 + |x|^p)`` with
    ``C = sup f`` and ``p = 0``.
    """

    breakpoints: tuple
    values: tuple
    left_tail_value: float | None = None
    right_tail_value: float | None = None
    sup: float = field(init=False, repr=False)
    slopes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        x = [float(v) for v in self.breakpoints]
        y = [float(v) for v in self.values]
        if len(x) == 0 or len(x) != len(y):
            raise PayoffError("breakpoints and values must be non-empty and of equal length")
        if not all(math.isfinite(v) for v in x + y):
            raise PayoffError("payoff data must be finite")
        if any(b <= a for a, b in zip(x, x[1:])):
            raise NonMonotoneBreakpoints(f"breakpoints must strictly increase: {x}")
        if any(v < 0 for v in y):
            raise NegativeValue(f"payoff values must be >= 0: {y}")
        left = y[0] if self.left_tail_value is None else float(self.left_tail_value)
        right = y[-1] if self.right_tail_value is None else float(self.right_tail_value)
        if left != y[0] or right != y[-1]:
            raise DiscontinuousTail(
                f"tail constants ({left}, {right}) must equal endpoint values ({y[0]}, {y[-1]})"
            )
        slopes = tuple((y[i + 1] - y[i]) / (x[i + 1] - x[i]) for i in range(len(x) - 1))
        object.__setattr__(self, "breakpoints", tuple(x))
        object.__setattr__(self, "values", tuple(y))
        object.__setattr__(self, "left_tail_value", left)
        object.__setattr__(self, "right_tail_value", right)
        object.__setattr__(self, "sup", max(y))
        object.__setattr__(self, "slopes", slopes)

    # growth constants of the sub-quadratic bound, kept for documentation
    @property
    def growth_constants(self) -> tuple[float, float]:
        return self.sup, 0.0

    @property
    def lipschitz(self) -> float:
        return max((abs(s) for s in self.slopes), default=0.0)

    @property
    def tail_slopes(self) -> tuple[float, float]:
        return 0.0, 0.0

    def pieces(self):
        """Affine pieces ``(lo, hi, slope, intercept)`` covering the real line.

        On ``[lo, hi]`` the payoff equals ``intercept + slope * x``.  The two
        tails are included with infinite ends.
        """
        x, y = self.breakpoints, self.values
        out = [(-math.inf, x[0], 0.0, y[0])]
        for i, s in enumerate(self.slopes):
            out.append((x[i], x[i + 1], s, y[i] - s * x[i]))
        out.append((x[-1], math.inf, 0.0, y[-1]))
        return out

    def __call__(self, x):
        return eval_payoff(self, x)

    @classmethod
    def from_dict(cls, d: dict) -> "PayoffSpec":
        try:
            return validate_payoff(
                d["breakpoints"], d["values"], d.get("left_tail_value"), d.get("right_tail_value")
            )
        except KeyError as exc:
            raise PayoffError(f"payoff JSON is missing {exc}") from None

    @classmethod
    def from_json(cls, path) -> "PayoffSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "values": list(self.values)}


def validate_payoff(breakpoints, values, left_tail_value=None, right_tail_value=None) -> PayoffSpec:
    """Build a :class:`PayoffSpec` from raw data, raising on invalid input.

    Tails default to the endpoint values.  Raises ``NonMonotoneBreakpoints``,
    ``NegativeValue`` or ``DiscontinuousTail``.
    """
    return PayoffSpec(tuple(breakpoints), tuple(values), left_tail_value, right_tail_value)


def eval_payoff(spec: PayoffSpec, x):
    x_arr = np.asarray(x, dtype=float)
    out = np.interp(x_arr, spec.breakpoints, spec.values)
    return float(out) if out.ndim == 0 else out


# canonical payoffs used throughout the tests and experiments
def capped_call() -> PayoffSpec:
    return validate_payoff([0.0, 1.0], [0.0, 1.0])


def butterfly() -> PayoffSpec:
    return validate_payoff([-1.0, 0.0, 1.0], [0.0, 1.0, 0.0])


def two_plateau() -> PayoffSpec:
    return validate_payoff([0.0, 1.0], [0.5, 1.0])


def constant_payoff(c: float) -> PayoffSpec:
    return validate_payoff([0.0], [c])


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for expectations under ``N(mean, variance)``."""

    nodes: np.ndarray
    weights: np.ndarray
    mean: float
    variance: float

    def expect(self, fn):
        return float(np.dot(self.weights, fn(self.nodes)))

    def __len__(self):
        return len(self.nodes)


def gauss_quadrature(n: int, mean: float = 0.0, variance: float = 1.0) -> QuadratureRule:
    """n-point Gauss-Hermite rule, exact for polynomials of degree ``2n - 1``."""
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    if not variance > 0:
        raise DegenerateVariance(f"variance must be > 0, got {variance}")
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    # symmetrize to kill rounding asymmetry in the eigen-solver output
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    return QuadratureRule(_frozen(mean + math.sqrt(variance) * x), _frozen(w), float(mean), float(variance))


@dataclass(frozen=True)
class SeededStream:
    """Reproducible random stream identified by ``(seed, index, *path)``.

    Every call to :meth:`generator` starts the stream from the beginning, so
    identical identifiers always reproduce identical draws.  Distinct indices
    map to independent ``SeedSequence`` spawn keys.
    """

    seed: int
    index: int = 0
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.index),) + tuple(self.path))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, k: int) -> "SeededStream":
        return SeededStream(self.seed, self.index, self.path + (int(k),))


def draw_normal_increments(stream: SeededStream, count: int, mean: float = 0.0, variance: float = 1.0):
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return np.full(count, float(mean))
    return stream.generator().normal(mean, math.sqrt(variance), size=count)


def golden_section_min(fn, lo, hi, tol=1e-10, maxiter=200):
    """Vectorised golden-section search for ``min fn`` on ``[lo, hi]``.

    ``fn`` maps an array of abscissae to an array of values of the same
    shape; each entry is an independent 1D problem.  Returns ``(x, fx)``.
    Converges to a local minimum of unimodal-on-bracket functions; callers
    supply brackets from a coarse scan.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(maxiter):
        if np.all(np.abs(b - a) <= tol * (1.0 + np.abs(a) + np.abs(b))):
            break
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        probe = np.where(left, b - GOLDEN * (b - a), a + GOLDEN * (b - a))
        fp = fn(probe)
        c, d, fc, fd = (
            np.where(left, probe, d),
            np.where(left, c, probe),
            np.where(left, fp, fd),
            np.where(left, fc, fp),
        )
    x = np.where(fc <= fd, c, d)
    fx = np.minimum(fc, fd)
    # endpoints can beat interior probes when the minimum sits on the bracket edge
    fa, fb = fn(a), fn(b)
    x = np.where(fa < fx, a, x)
    fx = np.minimum(fa, fx)
    x = np.where(fb < fx, b, x)
    fx = np.minimum(fb, fx)
    return x, fx
