"""Generalization bounds evaluated from a recorded trajectory.

Every bound is a sum of per-iteration contributions, each damped by a decay
factor that measures how much later noisy iterations wash out what an early
iteration learned about its mini-batch.  Functions here are pure: they read
a :class:`~noisygen.optimizers.TrajectoryRecord` and return a
:class:`BoundReport`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .noise_channels import (
    Divergence,
    Exactness,
    NoiseKind,
    Norm,
    delta,
    gaussian_ccdf,
)
from .optimizers import ScheduleKind, TrajectoryRecord
from .stat_estimators import LossAssumption, implied_subgaussian

__all__ = [
    "BoundSpec",
    "BoundReport",
    "PreconditionError",
    "OrderingReport",
    "effective_diameter",
    "effective_clip",
    "decay_factors",
    "decay_product",
    "generic_bound",
    "dp_sgd_q",
    "dp_sgd_bound_gaussian",
    "dp_sgd_bound_laplace",
    "sgld_mi_surrogate",
    "sgld_bound",
    "sgld_trajectory_bound",
    "bound_ordering_check",
    "evaluate",
    "bound_curve",
    "sgld_curve",
]

_Kind = LossAssumption.Kind


class PreconditionError(ValueError):
    """The record or the loss assumption does not fit the requested bound."""


@dataclass(frozen=True)
class BoundSpec:
    """Which bound to evaluate and under which loss assumption.

    ``method`` picks the bound family: ``"generic"`` (pair-cost form),
    ``"dp_sgd"`` (closed-form statistics), ``"sgld"``, ``"sgld_trajectory"``,
    or ``"auto"`` to choose from the record.
    """

    divergence: Divergence
    assumption: LossAssumption
    n: int
    use_decay: bool = True
    method: str = "auto"

    def __post_init__(self):
        f = Divergence(self.divergence)
        object.__setattr__(self, "divergence", f)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        kind = self.assumption.kind
        allowed = {
            Divergence.TV: {_Kind.BOUNDED},
            Divergence.KL: {_Kind.SUB_GAUSSIAN, _Kind.BOUNDED},
            Divergence.CHI2: {_Kind.FINITE_VARIANCE, _Kind.BOUNDED},
        }[f]
        if kind not in allowed:
            raise PreconditionError(f"{f.value} bound cannot use a {kind.value} loss assumption")
        if self.method not in ("auto", "generic", "dp_sgd", "sgld", "sgld_trajectory"):
            raise ValueError(f"unknown bound method {self.method!r}")

    @property
    def constant(self) -> float:
        """Multiplier of the bound: sigma for KL, A for TV, the std bound for chi^2."""
        if self.divergence is Divergence.KL:
            return implied_subgaussian(self.assumption)
        if self.divergence is Divergence.TV:
            return self.assumption.value
        return self.assumption.std

    @property
    def label(self) -> str:
        tag = "" if self.use_decay else "_nodecay"
        return f"{self.method}_{self.divergence.value}{tag}"


@dataclass(frozen=True)
class BoundReport:
    total: float
    per_iteration_terms: tuple = ()
    decay_factors: tuple = ()
    exactness: Exactness = Exactness.EXACT
    label: str = ""

    def __float__(self):
        return float(self.total)


def _convert(value: float, src: Norm, dst: Norm, dim: int) -> float:
    # an upper bound on the dst-norm of any vector whose src-norm is `value`
    if src is dst or not math.isfinite(value):
        return value
    return value * math.sqrt(dim) if src is Norm.L2 else value


def _noise_norm(record: TrajectoryRecord) -> Norm:
    return record.noise.norm or Norm.L2


def effective_diameter(record: TrajectoryRecord) -> float:
    """Domain diameter measured in the noise's norm."""
    return _convert(record.diameter, record.domain.norm, _noise_norm(record), record.dim)


def effective_clip(record: TrajectoryRecord) -> float:
    """Clip bound K measured in the noise's norm (``inf`` when unclipped)."""
    if record.clip is None:
        return math.inf
    return float(record.clip)


def _deltas(record: TrajectoryRecord, scale: float = 1.0) -> np.ndarray:
    D, K = effective_diameter(record), effective_clip(record)
    if not (math.isfinite(D) and math.isfinite(K)):
        return np.ones(record.T)
    return np.array([
        float(delta(record.noise, scale * (D + 2.0 * cfg.eta * K), cfg.m)) if cfg.m > 0 else 1.0
        for cfg in record.iterations
    ])


def decay_factors(record: TrajectoryRecord) -> np.ndarray:
    """``Q_t`` for ``t = 1..T``: product of the coefficients of later iterations."""
    d = _deltas(record)
    tail = np.ones(record.T)
    if record.T > 1:
        tail[:-1] = np.cumprod(d[::-1])[::-1][1:]
    return np.clip(tail, 0.0, 1.0)


def decay_product(record: TrajectoryRecord, t: int) -> float:
    """``prod_{t' = t+1}^{T} delta(D + 2 eta_t' K, m_t')``; 1 for ``t = T``."""
    if not 1 <= t <= record.T:
        raise ValueError("t out of range")
    return float(decay_factors(record)[t - 1])


def _finish(terms, Q, label, exact=Exactness.EXACT) -> BoundReport:
    terms = np.asarray(terms, dtype=float)
    total = float(terms.sum()) if terms.size else 0.0
    if not math.isfinite(total):
        total, exact = math.inf, Exactness.UPPER_BOUND
    return BoundReport(total, tuple(terms.tolist()), tuple(np.asarray(Q, float).tolist()), Exactness(exact), label)


def _noise_exactness(record, f: Divergence) -> Exactness:
    if NoiseKind(record.noise.kind) is NoiseKind.LAPLACE:
        return Exactness.UPPER_BOUND
    return Exactness.EXACT


def generic_bound(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Pair-cost bound for any noise family on a without-replacement record.

    Uses the average closed-form cost ``C_t`` between distinct per-example
    directions, evaluated at noise scale ``m_t b_t / eta_t`` and stored in the
    statistics snapshot.  The square root (KL and chi^2) is taken after
    averaging.
    """
    if record.schedule is not ScheduleKind.WITHOUT_REPLACEMENT:
        raise PreconditionError("generic bound needs a without-replacement schedule; use sgld_bound")
    f = spec.divergence
    Q = decay_factors(record) if spec.use_decay else np.ones(record.T)
    c = spec.constant / spec.n
    terms = []
    for cfg, st, q in zip(record.iterations, record.stats, Q):
        if f not in st.pair_cost:
            raise PreconditionError(f"record lacks pair costs at iteration {cfg.t}")
        C = st.pair_cost[f]
        if f is Divergence.TV:
            terms.append(c * cfg.b * C * q)
        elif f is Divergence.KL:
            terms.append(math.sqrt(2.0) * c * cfg.b * math.sqrt(C * q))
        else:
            terms.append(c * cfg.b * math.sqrt(C * q))
    return _finish(terms, Q, spec.label, _noise_exactness(record, f))


def _constant_eta(record: TrajectoryRecord) -> float:
    if record.T == 0:
        return 0.0
    etas = np.array([cfg.eta for cfg in record.iterations])
    if not np.allclose(etas, etas[0], rtol=1e-12, atol=0.0):
        raise PreconditionError("closed-form DP-SGD bounds need a constant learning rate")
    if any(not math.isclose(cfg.m, cfg.eta, rel_tol=1e-12) for cfg in record.iterations):
        raise PreconditionError("closed-form DP-SGD bounds need noise magnitude equal to eta")
    return float(etas[0])


def dp_sgd_q(record: TrajectoryRecord) -> float:
    """Per-iteration decay coefficient ``q`` of a DP-SGD record (1 if D or K is infinite)."""
    eta = _constant_eta(record)
    D, K = effective_diameter(record), effective_clip(record)
    if not (math.isfinite(D) and math.isfinite(K)) or eta <= 0:
        return 1.0
    x = D + 2.0 * eta * K
    if NoiseKind(record.noise.kind) is NoiseKind.GAUSSIAN:
        return float(1.0 - 2.0 * gaussian_ccdf(x / (2.0 * eta)))
    return float(-math.expm1(-x / eta))


def _powers(record, spec) -> np.ndarray:
    T = record.T
    if not spec.use_decay:
        return np.ones(T)
    q = dp_sgd_q(record)
    return q ** np.arange(T - 1, -1, -1, dtype=float)


def dp_sgd_bound_gaussian(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Closed-form DP-SGD bound for Gaussian noise.

    Reads the centred 2-norm statistics of the record: total variance (KL),
    mean deviation norm (TV) and the exponential moment
    ``E exp(4 ||g - e||^2) - 1`` (chi^2).
    """
    if NoiseKind(record.noise.kind) is not NoiseKind.GAUSSIAN:
        raise PreconditionError("Gaussian DP-SGD bound on a non-Gaussian record")
    Q = _powers(record, spec)
    c = spec.constant / spec.n
    f = spec.divergence
    with np.errstate(invalid="ignore"):
        if f is Divergence.KL:
            terms = [2.0 * c * math.sqrt(st.variance * q) for st, q in zip(record.stats, Q)]
        elif f is Divergence.TV:
            terms = [c * st.mean_l2_dev * q for st, q in zip(record.stats, Q)]
        else:
            terms = [c * math.sqrt(st.exp_l2sq * q) for st, q in zip(record.stats, Q)]
    return _finish(terms, Q, "dp_sgd_" + spec.label.split("_", 1)[1])


def dp_sgd_bound_laplace(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Closed-form DP-SGD bound for Laplace noise (1-norm geometry, median centring)."""
    if NoiseKind(record.noise.kind) is not NoiseKind.LAPLACE:
        raise PreconditionError("Laplace DP-SGD bound on a non-Laplace record")
    Q = _powers(record, spec)
    c = spec.constant / spec.n
    f = spec.divergence
    terms = []
    for cfg, st, q in zip(record.iterations, record.stats, Q):
        if f is Divergence.KL:
            terms.append(2.0 * c * math.sqrt(cfg.b * st.mmae * q))
        elif f is Divergence.TV:
            terms.append(math.sqrt(2.0) * c * math.sqrt(cfg.b) * st.mean_sqrt_l1_dev * q)
        else:
            terms.append(c * math.sqrt(cfg.b * st.exp_l1 * q))
    return _finish(terms, Q, "dp_sgd_" + spec.label.split("_", 1)[1], Exactness.UPPER_BOUND)


def sgld_mi_surrogate(beta: float, eta: float, var: float, b: int) -> float:
    """Per-iteration upper bound on the information one example leaks: ``beta eta Var / (4 b^2)``.

    ``var`` is the per-example gradient variance.
    """
    return beta * eta * var / (4.0 * b * b)


def _sgld_check(record: TrajectoryRecord, spec: BoundSpec):
    if record.schedule is not ScheduleKind.WITH_REPLACEMENT or record.partition is None:
        raise PreconditionError("SGLD bound needs a with-replacement record with its partition")
    if spec.divergence is not Divergence.KL:
        raise PreconditionError("SGLD bounds are KL (mutual information) bounds")
    if any(cfg.beta is None for cfg in record.iterations):
        raise PreconditionError("record lacks inverse temperatures")
    return implied_subgaussian(spec.assumption)


def sgld_bound(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Mini-batch SGLD bound ``sqrt(2b) sigma / (2n) sum_j sqrt(sum_{t in T_j} beta eta Var_batch)``.

    ``Var_batch`` is the variance of the batch-averaged gradient, estimated as
    the per-example variance divided by ``b``.  ``per_iteration_terms`` holds
    ``beta_t eta_t Var_batch_t``.
    """
    sigma = _sgld_check(record, spec)
    b = len(record.partition[0])
    terms = [cfg.beta * cfg.eta * st.variance / b for cfg, st in zip(record.iterations, record.stats)]
    per_batch: dict = {}
    for cfg, v in zip(record.iterations, terms):
        per_batch[cfg.batch_index] = per_batch.get(cfg.batch_index, 0.0) + v
    total = math.sqrt(2.0 * b) * sigma / (2.0 * spec.n) * sum(math.sqrt(s) for s in per_batch.values())
    return BoundReport(total, tuple(terms), tuple([1.0] * record.T), Exactness.EXACT, "sgld_kl")


def sgld_trajectory_bound(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Looser SGLD bound that forgets which batch each iteration used.

    ``(sqrt 2 sigma / 2) min{(1/n) sum_t sqrt(beta eta Var_t), sqrt(sum_t beta eta Var_t / (b n))}``
    with per-example variances.
    """
    sigma = _sgld_check(record, spec)
    b = len(record.partition[0])
    terms = np.array([cfg.beta * cfg.eta * st.variance for cfg, st in zip(record.iterations, record.stats)])
    first = np.sqrt(terms).sum() / spec.n
    second = math.sqrt(terms.sum() / (b * spec.n))
    total = math.sqrt(2.0) * sigma / 2.0 * min(first, second)
    return BoundReport(total, tuple(terms.tolist()), tuple([1.0] * record.T), Exactness.EXACT,
                       "sgld_trajectory_kl")


@dataclass(frozen=True)
class OrderingReport:
    tv: float
    kl: float
    chi2: float
    holds: bool = field(default=True)


def bound_ordering_check(record: TrajectoryRecord, A: float, n: int, sigma_hat: float | None = None,
                         use_decay: bool = True, rtol: float = 1e-12) -> OrderingReport:
    """Evaluate the three Gaussian DP-SGD bounds and check ``TV <= KL <= chi^2``.

    The KL bound uses ``sigma = A/2`` and the chi^2 bound uses
    ``sigma_hat`` (default ``A/2``, and at most that).

    Raises
    ------
    PreconditionError
        On a non-Gaussian record or ``sigma_hat > A/2``.
    AssertionError
        When the ordering fails beyond ``rtol``.
    """
    if sigma_hat is None:
        sigma_hat = A / 2.0
    if sigma_hat > A / 2.0:
        raise PreconditionError("ordering needs sigma_hat <= A/2")
    bounded = LossAssumption.bounded(A)
    tv = dp_sgd_bound_gaussian(record, BoundSpec(Divergence.TV, bounded, n, use_decay)).total
    kl = dp_sgd_bound_gaussian(record, BoundSpec(Divergence.KL, bounded, n, use_decay)).total
    chi = dp_sgd_bound_gaussian(record, BoundSpec(
        Divergence.CHI2, LossAssumption.finite_variance(sigma_hat**2), n, use_decay)).total
    holds = tv <= kl * (1 + rtol) and kl <= chi * (1 + rtol)
    if not holds:
        raise AssertionError(f"ordering violated: tv={tv!r} kl={kl!r} chi2={chi!r}")
    return OrderingReport(tv, kl, chi, holds)


def _resolve(record: TrajectoryRecord, spec: BoundSpec) -> str:
    if spec.method != "auto":
        return spec.method
    if record.schedule is ScheduleKind.WITH_REPLACEMENT:
        return "sgld"
    if record.algorithm == "dp_sgd" and NoiseKind(record.noise.kind) is not NoiseKind.UNIFORM:
        return "dp_sgd"
    return "generic"


def evaluate(record: TrajectoryRecord, spec: BoundSpec) -> BoundReport:
    """Dispatch ``spec`` to the matching bound function."""
    method = _resolve(record, spec)
    if method == "generic":
        return generic_bound(record, spec)
    if method == "dp_sgd":
        if NoiseKind(record.noise.kind) is NoiseKind.GAUSSIAN:
            return dp_sgd_bound_gaussian(record, spec)
        return dp_sgd_bound_laplace(record, spec)
    if method == "sgld":
        return sgld_bound(record, spec)
    return sgld_trajectory_bound(record, spec)


def sgld_curve(record: TrajectoryRecord, spec: BoundSpec, at) -> np.ndarray:
    """SGLD bound of every prefix length in ``at``, in one pass."""
    sigma = _sgld_check(record, spec)
    b = len(record.partition[0])
    pref = math.sqrt(2.0 * b) * sigma / (2.0 * spec.n)
    wanted = sorted(set(int(t) for t in at))
    out, sums = {}, {}
    k = 0
    if wanted and wanted[0] == 0:
        out[0] = 0.0
        k = 1
    for cfg, st in zip(record.iterations, record.stats):
        sums[cfg.batch_index] = sums.get(cfg.batch_index, 0.0) + cfg.beta * cfg.eta * st.variance / b
        while k < len(wanted) and wanted[k] == cfg.t:
            out[cfg.t] = pref * sum(math.sqrt(s) for s in sums.values())
            k += 1
    return np.array([out[int(t)] for t in at])


def bound_curve(record: TrajectoryRecord, spec: BoundSpec, at) -> np.ndarray:
    """Bound of the run stopped after each prefix length in ``at``."""
    if _resolve(record, spec) == "sgld":
        return sgld_curve(record, spec, at)
    return np.array([evaluate(record.prefix(int(t)), spec).total for t in at])
