"""Additive noise channels: divergence costs, Dobrushin coefficients, samplers.

A channel maps ``x -> x + m * N`` with ``N`` drawn i.i.d. per coordinate from a
standard Gaussian, Laplace or Uniform[-1, 1] distribution.  The functions here
give closed forms (or upper bounds) of the f-divergence between the outputs
for two inputs, and the worst-case total variation over inputs at distance at
most ``A`` (the contraction coefficient that drives the decay factor).

Every closed form is tagged with :class:`Exactness`, because several of them
are only upper bounds; downstream bounds stay valid either way.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "NoiseKind",
    "Norm",
    "Divergence",
    "Exactness",
    "NoiseModel",
    "ChannelValue",
    "NoExactFormError",
    "QuadratureError",
    "gaussian_ccdf",
    "delta",
    "cost",
    "cost_from_diff",
    "cost_exact_1d",
    "oracle_divergence_1d",
    "noise_logpdf",
    "sample_noise",
]


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    UNIFORM = "uniform"


class Norm(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"


class Divergence(str, enum.Enum):
    """The three f-divergences: KL (t log t), TV (|t-1|/2), chi^2 (t^2 - 1)."""

    KL = "kl"
    TV = "tv"
    CHI2 = "chi2"


class Exactness(str, enum.Enum):
    EXACT = "exact"
    UPPER_BOUND = "upper_bound"


class NoExactFormError(ValueError):
    """No exact one-dimensional expression is available for the combination."""


class QuadratureError(RuntimeError):
    """The numerical oracle failed to converge."""


_DEFAULT_NORM = {
    NoiseKind.GAUSSIAN: Norm.L2,
    NoiseKind.LAPLACE: Norm.L1,
    NoiseKind.UNIFORM: Norm.L2,  # only defined in 1-D, where all norms agree
}


@dataclass(frozen=True)
class NoiseModel:
    """Standard noise family, i.i.d. per coordinate, with its paired norm.

    Gaussian pairs with the 2-norm and Laplace with the 1-norm; any other
    pairing is rejected.  Uniform noise is supported on [-1, 1] and its closed
    forms only exist in one dimension.
    """

    kind: NoiseKind = NoiseKind.GAUSSIAN
    norm: Norm | None = None

    def __post_init__(self):
        kind = NoiseKind(self.kind)
        object.__setattr__(self, "kind", kind)
        norm = _DEFAULT_NORM[kind] if self.norm is None else Norm(self.norm)
        if norm is not _DEFAULT_NORM[kind] and kind is not NoiseKind.UNIFORM:
            raise ValueError(
                f"{kind.value} noise pairs with the {_DEFAULT_NORM[kind].value} norm, "
                f"got {norm.value}"
            )
        object.__setattr__(self, "norm", norm)

    @classmethod
    def gaussian(cls) -> "NoiseModel":
        return cls(NoiseKind.GAUSSIAN)

    @classmethod
    def laplace(cls) -> "NoiseModel":
        return cls(NoiseKind.LAPLACE)

    @classmethod
    def uniform(cls) -> "NoiseModel":
        return cls(NoiseKind.UNIFORM)


class ChannelValue(float):
    """A float carrying whether it is an exact value or an upper bound."""

    exactness: Exactness

    def __new__(cls, value, exactness=Exactness.EXACT):
        obj = super().__new__(cls, value)
        obj.exactness = Exactness(exactness)
        return obj

    @property
    def is_exact(self) -> bool:
        return self.exactness is Exactness.EXACT

    def __repr__(self):
        return f"ChannelValue({float(self)!r}, {self.exactness.value})"


def gaussian_ccdf(x):
    """Standard normal upper tail probability, ``P(N > x)``.

    Accepts scalars or arrays; saturates to 0 and 1 in the far tails.
    """
    out = special.ndtr(-np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def delta(noise: NoiseModel, A: float, m: float) -> ChannelValue:
    """Dobrushin coefficient ``delta(A, m)`` of the channel ``x + m N``.

    The supremum of the total variation between outputs over inputs at
    distance at most ``A`` in the noise's norm.

    Parameters
    ----------
    noise : NoiseModel
    A : float
        Input diameter, ``A >= 0``.  ``inf`` gives 1.
    m : float
        Noise magnitude, ``m > 0``.

    Returns
    -------
    ChannelValue
        In [0, 1].  The Laplace value is an upper bound valid in any
        dimension; Gaussian and Uniform values are exact.
    """
    if A < 0 or not m > 0:
        raise ValueError(f"need A >= 0 and m > 0, got A={A}, m={m}")
    kind = NoiseKind(noise.kind)
    if math.isinf(A):
        value = 1.0
    elif kind is NoiseKind.GAUSSIAN:
        value = 1.0 - 2.0 * gaussian_ccdf(A / (2.0 * m))
    elif kind is NoiseKind.LAPLACE:
        return ChannelValue(-math.expm1(-A / m), Exactness.UPPER_BOUND)
    elif kind is NoiseKind.UNIFORM:
        value = min(1.0, A / (2.0 * m))
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unsupported noise kind {kind}")
    return ChannelValue(min(max(value, 0.0), 1.0), Exactness.EXACT)


def _exactness(f: Divergence, kind: NoiseKind) -> Exactness:
    if kind is NoiseKind.GAUSSIAN:
        return Exactness.UPPER_BOUND if f is Divergence.TV else Exactness.EXACT
    if kind is NoiseKind.LAPLACE:
        return Exactness.UPPER_BOUND
    return Exactness.EXACT


def cost_from_diff(f, noise: NoiseModel, diff, m) -> np.ndarray:
    """Vectorised closed-form cost given input differences ``x - x'``.

    ``diff`` has shape ``(..., d)``; ``m`` broadcasts against the leading
    axes.  Returns an array of shape ``diff.shape[:-1]``.
    """
    f = Divergence(f)
    kind = NoiseKind(noise.kind)
    diff = np.asarray(diff, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise ValueError("noise magnitude m must be positive")
    if diff.ndim == 0:
        diff = diff[None]
    if kind is NoiseKind.UNIFORM and diff.shape[-1] != 1:
        raise ValueError("uniform-noise costs are only defined in dimension 1")

    with np.errstate(over="ignore"):
        if kind is NoiseKind.GAUSSIAN:
            sq = np.einsum("...i,...i->...", diff, diff) / m**2
            if f is Divergence.KL:
                return sq / 2.0
            if f is Divergence.CHI2:
                return np.expm1(sq)
            return np.minimum(np.sqrt(sq) / 2.0, 1.0)
        if kind is NoiseKind.LAPLACE:
            l1 = np.abs(diff).sum(axis=-1) / m
            if f is Divergence.KL:
                return l1
            if f is Divergence.CHI2:
                return np.expm1(l1)
            return np.minimum(np.sqrt(l1 / 2.0), 1.0)
        # uniform on [-1, 1]; "inf * 0 = 0"
        gap = np.abs(diff[..., 0])
        if f is Divergence.TV:
            return np.minimum(gap / (2.0 * m), 1.0)
        return np.where(gap > 0, np.inf, 0.0)


def cost(f, noise: NoiseModel, x, x_prime, m: float) -> ChannelValue:
    """Closed-form ``D_f(P_{x + mN} || P_{x' + mN})`` (or its upper bound).

    Uniform-noise KL and chi^2 are ``inf`` whenever ``x != x'``; infinity is
    a legitimate return value, not an error.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != x_prime.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    f = Divergence(f)
    value = float(cost_from_diff(f, noise, x - x_prime, m))
    return ChannelValue(value, _exactness(f, NoiseKind(noise.kind)))


def cost_exact_1d(f, noise: NoiseModel, shift: float, m: float) -> float:
    """Exact scalar divergence between ``mN`` and ``shift + mN``.

    Raises
    ------
    NoExactFormError
        For Laplace total variation, which only has a Pinsker bound here.
    """
    if not m > 0:
        raise ValueError("m must be positive")
    f = Divergence(f)
    kind = NoiseKind(noise.kind)
    v = abs(shift) / m
    with np.errstate(over="ignore"):
        if kind is NoiseKind.GAUSSIAN:
            if f is Divergence.KL:
                return v * v / 2.0
            if f is Divergence.CHI2:
                return float(np.expm1(v * v))
            return 1.0 - 2.0 * gaussian_ccdf(v / 2.0)
        if kind is NoiseKind.LAPLACE:
            if f is Divergence.KL:
                return v + math.expm1(-v)
            if f is Divergence.CHI2:
                return float(2.0 / 3.0 * np.exp(v) + np.exp(-2.0 * v) / 3.0 - 1.0)
            raise NoExactFormError("no exact total variation form for Laplace noise")
    if f is Divergence.TV:
        return min(1.0, v / 2.0)
    return math.inf if v > 0 else 0.0


def noise_logpdf(noise: NoiseModel, y, loc: float = 0.0, m: float = 1.0):
    """Log density of ``loc + m * N`` in one dimension (``-inf`` off support)."""
    z = (np.asarray(y, dtype=float) - loc) / m
    kind = NoiseKind(noise.kind)
    if kind is NoiseKind.GAUSSIAN:
        return -0.5 * z * z - 0.5 * math.log(2 * math.pi) - math.log(m)
    if kind is NoiseKind.LAPLACE:
        return -np.abs(z) - math.log(2.0 * m)
    with np.errstate(divide="ignore"):
        return np.where(np.abs(z) <= 1.0, -math.log(2.0 * m), -np.inf)


def _integrand(f: Divergence, lp, lq):
    """Pointwise ``q * f(p / q)`` from log densities."""
    p = np.exp(lp)
    q = np.exp(lq)
    if f is Divergence.TV:
        return 0.5 * np.abs(p - q)
    out = np.zeros_like(p)
    both = np.isfinite(lp) & np.isfinite(lq)
    p_only = np.isfinite(lp) & ~np.isfinite(lq)
    with np.errstate(over="ignore"):
        if f is Divergence.KL:
            out[both] = p[both] * (lp[both] - lq[both])
        else:
            out[both] = np.exp(2.0 * lp[both] - lq[both]) - p[both]
    out[p_only] = np.inf
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _composite_gauss(f, noise, shift, m, breaks, panels):
    # open rule: no evaluation on breakpoints, where uniform densities jump
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b <= a:
            continue
        edges = np.linspace(a, b, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        y = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
        vals = _integrand(f, noise_logpdf(noise, y, 0.0, m), noise_logpdf(noise, y, shift, m))
        if not np.all(np.isfinite(vals)):
            return math.inf
        total += float((vals.reshape(panels, -1) @ _GL_WEIGHTS) @ half)
    return total


def oracle_divergence_1d(
    f,
    noise: NoiseModel,
    shift: float,
    m: float,
    *,
    width: float = 12.0,
    tol: float = 1e-6,
    start_panels: int = 16,
    max_panels: int = 1 << 14,
) -> float:
    """Quadrature estimate of ``D_f(P_{mN} || P_{shift + mN})`` in one dimension.

    Independent of the closed forms: it integrates ``q f(p/q)`` built from the
    two noise densities with composite Gauss-Legendre rules.  The range spans
    ``width`` scale units beyond both centres and their reflections, with
    breakpoints at every kink and support edge.  Panels double until two
    successive estimates differ by less than ``tol * max(1, |estimate|)``; the
    range then doubles once to confirm the tails are negligible.

    Raises
    ------
    QuadratureError
        If refinement does not converge within ``max_panels``.
    """
    f = Divergence(f)
    if not m > 0:
        raise ValueError("m must be positive")
    kind = NoiseKind(noise.kind)
    s = float(shift)

    def estimate(w):
        lo = -abs(s) - w * m
        hi = abs(s) + w * m
        breaks = {lo, hi, 0.0, s}
        if kind is NoiseKind.UNIFORM:
            breaks |= {-m, m, s - m, s + m}
        breaks = sorted(b for b in breaks if lo <= b <= hi)
        prev = _composite_gauss(f, noise, s, m, breaks, start_panels)
        panels = start_panels
        while panels < max_panels:
            panels *= 2
            cur = _composite_gauss(f, noise, s, m, breaks, panels)
            if math.isinf(cur) and math.isinf(prev):
                return cur
            if abs(cur - prev) < tol * max(1.0, abs(cur)):
                return cur
            prev = cur
        raise QuadratureError(
            f"quadrature did not converge for {f.value}/{kind.value}, shift={s}, m={m}"
        )

    first = estimate(width)
    wider = estimate(2.0 * width)
    if math.isinf(first) or math.isinf(wider):
        return math.inf
    if abs(wider - first) >= 10.0 * tol * max(1.0, abs(wider)):
        raise QuadratureError(f"quadrature range too narrow for shift={s}, m={m}")
    return max(wider, 0.0)


def sample_noise(noise: NoiseModel, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``dim`` i.i.d. standard coordinates of the noise family."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    kind = NoiseKind(noise.kind)
    if kind is NoiseKind.GAUSSIAN:
        return rng.standard_normal(dim)
    if kind is NoiseKind.LAPLACE:
        return rng.laplace(0.0, 1.0, dim)
    return rng.uniform(-1.0, 1.0, dim)
