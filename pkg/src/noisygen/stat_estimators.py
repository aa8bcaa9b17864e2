"""Empirical dispersion statistics of per-example gradients and losses."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SampleSource",
    "Center",
    "GradientSampleSet",
    "LossAssumption",
    "TooFewSamplesError",
    "variance",
    "batch_variance",
    "mmae",
    "lower_median",
    "centered_norm_mean",
    "exp_moment",
    "implied_subgaussian",
    "loss_variance",
]


class SampleSource(str, enum.Enum):
    IN_BATCH = "in_batch"
    HOLD_OUT = "hold_out"


class Center(str, enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"


class TooFewSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class GradientSampleSet:
    """Per-example gradients ``g(W_{t-1}, z_i)``, one row per example."""

    samples: np.ndarray
    iteration: int = 0
    source: SampleSource = SampleSource.IN_BATCH

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError("samples must be a 2-D array (rows = examples)")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "source", SampleSource(self.source))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _rows(samples, minimum=2) -> np.ndarray:
    if isinstance(samples, GradientSampleSet):
        arr = samples.samples
    else:
        arr = np.asarray(samples, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
    if arr.shape[0] < minimum:
        raise TooFewSamplesError(f"need at least {minimum} rows, got {arr.shape[0]}")
    return arr


def lower_median(samples) -> np.ndarray:
    """Per-coordinate median; the lower middle order statistic for even counts."""
    arr = _rows(samples, minimum=1)
    k = (arr.shape[0] - 1) // 2
    return np.partition(arr, k, axis=0)[k]


def _center(arr: np.ndarray, center) -> np.ndarray:
    if Center(center) is Center.MEAN:
        return arr.mean(axis=0)
    return lower_median(arr)


def _norms(dev: np.ndarray, norm: str) -> np.ndarray:
    if str(norm).lower() in ("l1", "norm.l1"):
        return np.abs(dev).sum(axis=1)
    return np.sqrt(np.einsum("ij,ij->i", dev, dev))


def variance(samples) -> float:
    """Total population variance: ``mean ||g - mean(g)||_2^2`` (divides by n)."""
    arr = _rows(samples)
    dev = arr - arr.mean(axis=0)
    return float(np.einsum("ij,ij->", dev, dev) / arr.shape[0])


def batch_variance(samples, batch_size: int) -> float:
    """Variance of the average of ``batch_size`` i.i.d. rows: ``variance / b``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return variance(samples) / batch_size


def mmae(samples) -> float:
    """Minimum mean absolute error: mean 1-norm distance to the coordinate medians."""
    arr = _rows(samples)
    return float(np.abs(arr - lower_median(arr)).sum(axis=1).mean())


def centered_norm_mean(samples, norm="l2", center=Center.MEAN, power: float = 1.0) -> float:
    """Empirical ``E ||g - e||^power`` with ``e`` the coordinate mean or median.

    ``power=0.5`` gives the ``E sqrt(||g - e||_1)`` statistic of the Laplace
    total-variation bound.
    """
    arr = _rows(samples)
    dist = _norms(arr - _center(arr, center), norm)
    return float(np.mean(dist**power))


def exp_moment(samples, norm="l2", scale: float = 1.0, squared: bool = False,
               center=Center.MEAN) -> float:
    """Empirical ``E[exp(scale * ||g - e||^p)] - 1`` with ``p = 2`` if squared.

    Overflow yields ``inf`` rather than an error, so an exploding moment
    propagates as an infinite (trivial) bound.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    arr = _rows(samples)
    dist = _norms(arr - _center(arr, center), norm)
    expo = scale * (dist**2 if squared else dist)
    with np.errstate(over="ignore"):
        return float(np.mean(np.expm1(expo)))


class _LossKind(str, enum.Enum):
    SUB_GAUSSIAN = "sub_gaussian"
    BOUNDED = "bounded"
    FINITE_VARIANCE = "finite_variance"


@dataclass(frozen=True)
class LossAssumption:
    """Tail assumption on the evaluation loss.

    Use the constructors :meth:`sub_gaussian`, :meth:`bounded` and
    :meth:`finite_variance`.  ``value`` holds sigma, A, or the estimated
    variance respectively.
    """

    kind: _LossKind
    value: float = field(default=1.0)

    Kind = _LossKind

    def __post_init__(self):
        kind = _LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is _LossKind.FINITE_VARIANCE:
            if self.value < 0:
                raise ValueError("variance must be non-negative")
        elif not self.value > 0:
            raise ValueError(f"{kind.value} constant must be positive")

    @classmethod
    def sub_gaussian(cls, sigma: float) -> "LossAssumption":
        return cls(_LossKind.SUB_GAUSSIAN, sigma)

    @classmethod
    def bounded(cls, A: float) -> "LossAssumption":
        return cls(_LossKind.BOUNDED, A)

    @classmethod
    def finite_variance(cls, var: float) -> "LossAssumption":
        return cls(_LossKind.FINITE_VARIANCE, var)

    @property
    def std(self) -> float:
        """Standard deviation bound usable in the chi^2 bound."""
        if self.kind is _LossKind.FINITE_VARIANCE:
            return float(np.sqrt(self.value))
        if self.kind is _LossKind.BOUNDED:
            return self.value / 2.0
        raise ValueError("a sub-Gaussian assumption does not bound the loss variance")


def implied_subgaussian(assumption: LossAssumption) -> float:
    """Sub-Gaussian constant: sigma itself, or ``A / 2`` for a loss in [0, A]."""
    if assumption.kind is _LossKind.SUB_GAUSSIAN:
        return assumption.value
    if assumption.kind is _LossKind.BOUNDED:
        return assumption.value / 2.0
    raise ValueError("finite variance does not imply a sub-Gaussian constant")


def loss_variance(losses) -> float:
    """Population variance of held-out losses of the final parameter."""
    arr = np.asarray(losses, dtype=float).ravel()
    if arr.size < 2:
        raise TooFewSamplesError("need at least 2 losses")
    return float(arr.var())
