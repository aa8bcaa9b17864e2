"""Instrumented noisy iterative training loops.

All three algorithms share one recursion::

    w_t = Proj(w_{t-1} - eta_t * mean_i g(w_{t-1}, z_i) + m_t * N)

DP-SGD fixes ``m_t = eta_t`` and clips every per-example direction; SGLD
uses Gaussian noise of magnitude ``sqrt(2 eta_t / beta_t)`` and, by default,
no projection.  :func:`run_training` records dispersion statistics of the
per-example directions at every iteration, before the update consumes them,
so that the bound engine can be evaluated afterwards.

Randomness is split into named streams keyed by ``(seed, purpose, ...)``
(see :func:`stream`), so that a run is reproducible and the per-step noise
of a single run lines up with the one used by a one-client federated run.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .noise_channels import Divergence, NoiseKind, NoiseModel, Norm, cost_from_diff, sample_noise
from .stat_estimators import SampleSource

__all__ = [
    "DomainKind",
    "DomainSpec",
    "ScheduleKind",
    "OutputSelector",
    "Stream",
    "stream",
    "LearningRate",
    "IterationConfig",
    "GradientStats",
    "TrajectoryRecord",
    "TrainConfig",
    "ScheduleExhaustedError",
    "project",
    "clip_gradient",
    "clip_rows",
    "noisy_step",
    "dp_sgd_step",
    "sgld_step",
    "gradient_stats",
    "run_training",
]


class DomainKind(str, enum.Enum):
    L2_BALL = "l2_ball"
    L1_BALL = "l1_ball"
    BOX = "box"
    NONE = "none"


class ScheduleKind(str, enum.Enum):
    WITHOUT_REPLACEMENT = "without_replacement"
    WITH_REPLACEMENT = "with_replacement"


class OutputSelector(str, enum.Enum):
    LAST = "last"
    AVERAGE = "average"
    ARGMIN_LOSS = "argmin_loss"


class Stream(enum.IntEnum):
    """Purposes of the independent random streams derived from a seed."""

    INIT = 0
    SCHEDULE = 1
    NOISE = 2
    HOLDOUT = 3
    PAIRS = 4
    ORDER = 5
    SELECT = 6
    DATA = 7
    CORRUPT = 8


def stream(seed: int, purpose: Stream, *keys: int) -> np.random.Generator:
    """Generator for ``(seed, purpose, *keys)``; independent across keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), *map(int, keys)]))


@dataclass(frozen=True)
class DomainSpec:
    """Parameter domain W used for projection and for its diameter D.

    ``lo``/``hi`` bound a box; ``radius`` sizes a ball.  ``norm`` is the
    geometry of the decay factor (forced to 1-norm for the L1 ball).
    """

    kind: DomainKind = DomainKind.NONE
    radius: float = 1.0
    lo: float = -1.0
    hi: float = 1.0
    norm: Norm = Norm.L2

    def __post_init__(self):
        kind = DomainKind(self.kind)
        object.__setattr__(self, "kind", kind)
        norm = Norm.L1 if kind is DomainKind.L1_BALL else Norm(self.norm)
        if kind is DomainKind.L2_BALL:
            norm = Norm.L2
        object.__setattr__(self, "norm", norm)
        if kind in (DomainKind.L2_BALL, DomainKind.L1_BALL) and not self.radius > 0:
            raise ValueError("radius must be positive")
        if kind is DomainKind.BOX and not np.all(np.asarray(self.hi) > np.asarray(self.lo)):
            raise ValueError("box needs hi > lo")

    @classmethod
    def l2_ball(cls, radius: float) -> "DomainSpec":
        return cls(DomainKind.L2_BALL, radius=radius)

    @classmethod
    def l1_ball(cls, radius: float) -> "DomainSpec":
        return cls(DomainKind.L1_BALL, radius=radius, norm=Norm.L1)

    @classmethod
    def box(cls, lo: float, hi: float, norm: Norm = Norm.L2) -> "DomainSpec":
        return cls(DomainKind.BOX, lo=lo, hi=hi, norm=norm)

    @property
    def bounded(self) -> bool:
        return self.kind is not DomainKind.NONE

    def diameter(self, dim: int) -> float:
        """``sup ||w - w'||`` in the domain's norm; ``inf`` when unbounded."""
        if self.kind is DomainKind.NONE:
            return math.inf
        if self.kind in (DomainKind.L2_BALL, DomainKind.L1_BALL):
            return 2.0 * self.radius
        side = np.broadcast_to(np.asarray(self.hi, float) - np.asarray(self.lo, float), (dim,))
        return float(np.abs(side).sum() if self.norm is Norm.L1 else np.linalg.norm(side))

    def contains(self, w, tol: float = 1e-12) -> bool:
        w = np.asarray(w, dtype=float)
        if self.kind is DomainKind.NONE:
            return True
        if self.kind is DomainKind.L2_BALL:
            return float(np.linalg.norm(w)) <= self.radius + tol
        if self.kind is DomainKind.L1_BALL:
            return float(np.abs(w).sum()) <= self.radius + tol
        return bool(np.all(w >= np.asarray(self.lo) - tol) and np.all(w <= np.asarray(self.hi) + tol))

    def sample(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw over the domain (bounded domains only)."""
        if self.kind is DomainKind.L2_BALL:
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            return v * self.radius * rng.uniform() ** (1.0 / dim)
        if self.kind is DomainKind.L1_BALL:
            e = rng.exponential(size=dim + 1)
            signs = rng.choice([-1.0, 1.0], size=dim)
            return self.radius * signs * e[:dim] / e.sum()
        if self.kind is DomainKind.BOX:
            lo = np.broadcast_to(np.asarray(self.lo, float), (dim,))
            hi = np.broadcast_to(np.asarray(self.hi, float), (dim,))
            return rng.uniform(lo, hi)
        raise ValueError("cannot sample uniformly from an unbounded domain")


def _project_l1(w: np.ndarray, radius: float) -> np.ndarray:
    # sort-based Euclidean projection onto the simplex, applied to |w|
    a = np.abs(w)
    if a.sum() <= radius:
        return w.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, a.size + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(w) * np.maximum(a - theta, 0.0)


def project(w, domain: DomainSpec) -> np.ndarray:
    """Euclidean-nearest point of the domain (idempotent)."""
    w = np.asarray(w, dtype=float)
    kind = domain.kind
    if kind is DomainKind.NONE:
        return w.copy()
    if kind is DomainKind.L2_BALL:
        norm = float(np.linalg.norm(w))
        return w * (domain.radius / norm) if norm > domain.radius else w.copy()
    if kind is DomainKind.L1_BALL:
        return _project_l1(w, domain.radius)
    return np.clip(w, domain.lo, domain.hi)


def clip_gradient(g, K: float, norm=Norm.L2) -> np.ndarray:
    """Rescale ``g`` onto the ``K``-ball when its norm exceeds ``K``."""
    return clip_rows(np.asarray(g, dtype=float)[None, :], K, norm)[0]


def clip_rows(G: np.ndarray, K: float, norm=Norm.L2) -> np.ndarray:
    """Per-row clipping; every output row has norm at most ``K``."""
    if not K > 0:
        raise ValueError("clip bound K must be positive")
    G = np.asarray(G, dtype=float)
    if Norm(norm) is Norm.L1:
        norms = np.abs(G).sum(axis=1)
    else:
        norms = np.sqrt(np.einsum("ij,ij->i", G, G))
    scale = np.ones_like(norms)
    over = norms > K
    scale[over] = K / norms[over]
    out = G * scale[:, None]
    # rounding can leave a clipped row a hair above K
    if Norm(norm) is Norm.L1:
        after = np.abs(out).sum(axis=1)
    else:
        after = np.sqrt(np.einsum("ij,ij->i", out, out))
    fix = after > K
    if np.any(fix):
        out[fix] *= np.nextafter(K / after[fix], 0.0)[:, None]
    return out


def _mean_direction(grads) -> np.ndarray:
    G = getattr(grads, "samples", grads)
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    return G.mean(axis=0)


def noisy_step(w, grads, eta: float, m: float, noise: NoiseModel, domain: DomainSpec,
               rng: np.random.Generator) -> np.ndarray:
    """One projected noisy update with a single fresh noise draw.

    ``grads`` holds the per-example directions (rows) of the batch.
    """
    w = np.asarray(w, dtype=float)
    direction = _mean_direction(grads)
    if direction.shape != w.shape:
        raise ValueError(f"gradient dimension {direction.shape} does not match {w.shape}")
    nz = sample_noise(noise, w.size, rng)
    return project(w - eta * direction + m * nz, domain)


def dp_sgd_step(w, grads, eta: float, noise: NoiseModel, K: float | None,
                domain: DomainSpec, rng: np.random.Generator, clip_norm=Norm.L2) -> np.ndarray:
    """Projected DP-SGD: ``Proj(w - eta * (mean(clip(g_i)) + N))``."""
    G = np.asarray(getattr(grads, "samples", grads), dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    if K is not None:
        G = clip_rows(G, K, clip_norm)
    return noisy_step(w, G, eta, eta, noise, domain, rng)


def sgld_step(w, grads, eta: float, beta: float, rng: np.random.Generator,
              noise: NoiseModel | None = None, domain: DomainSpec | None = None) -> np.ndarray:
    """Langevin update ``w - eta * mean(g) + sqrt(2 eta / beta) * N``.

    Gaussian noise only.  ``beta = inf`` gives a plain SGD step (the noise
    draw still happens, so the stream stays aligned).
    """
    noise = noise or NoiseModel.gaussian()
    if NoiseKind(noise.kind) is not NoiseKind.GAUSSIAN:
        raise ValueError("SGLD requires Gaussian noise")
    m = math.sqrt(2.0 * eta / beta) if beta > 0 else math.inf
    return noisy_step(w, grads, eta, m, noise, domain or DomainSpec(), rng)


@dataclass(frozen=True)
class LearningRate:
    """``init * decay_rate ** (step / decay_steps)``; ``staircase`` floors the exponent."""

    init: float = 0.03
    decay_rate: float = 1.0
    decay_steps: int = 2000
    staircase: bool = False

    def __call__(self, t: int) -> float:
        """Learning rate of iteration ``t`` (1-based)."""
        e = (t - 1) / self.decay_steps
        if self.staircase:
            e = math.floor(e)
        return self.init * self.decay_rate**e


@dataclass(frozen=True)
class IterationConfig:
    t: int
    eta: float
    m: float
    b: int
    batch_ids: tuple
    beta: float | None = None
    batch_index: int | None = None

    def __post_init__(self):
        if len(set(self.batch_ids)) != len(self.batch_ids):
            raise ValueError("batch ids must be distinct within an iteration")
        if len(self.batch_ids) != self.b:
            raise ValueError("batch size does not match batch ids")


@dataclass(frozen=True)
class GradientStats:
    """Dispersion statistics of the per-example directions at one iteration."""

    n_samples: int
    source: SampleSource
    variance: float
    mmae: float
    mean_l2_dev: float
    mean_sqrt_l1_dev: float
    exp_l2sq: float
    exp_l1: float
    max_norm: float
    pair_cost: dict = field(default_factory=dict)
    gradients: np.ndarray | None = None


def _pair_cost(G: np.ndarray, noise: NoiseModel, m_eff: float, rng, max_exhaustive=64, n_pairs=2048):
    n = G.shape[0]
    if n < 2:
        return {}
    if n <= max_exhaustive:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
    else:
        i = rng.integers(0, n, n_pairs)
        j = (i + rng.integers(1, n, n_pairs)) % n
    diff = G[i] - G[j]
    out = {}
    for f in Divergence:
        with np.errstate(over="ignore"):
            out[f] = float(np.mean(cost_from_diff(f, noise, diff, m_eff)))
    return out


def gradient_stats(G, source=SampleSource.IN_BATCH, *, noise: NoiseModel | None = None,
                   m_eff: float | None = None, rng=None, keep: bool = False) -> GradientStats:
    """Snapshot of the statistics the bounds need, from a gradient matrix.

    When ``noise`` and ``m_eff`` are given, also averages the closed-form cost
    over pairs of distinct rows (all ordered pairs up to 64 rows, otherwise
    2048 random pairs drawn from ``rng``).
    """
    G = np.asarray(G, dtype=float)
    if G.shape[0] < 2:
        raise ValueError("need at least two per-example gradients for statistics")
    pair = {}
    if noise is not None and m_eff is not None and math.isfinite(m_eff) and m_eff > 0:
        if NoiseKind(noise.kind) is not NoiseKind.UNIFORM or G.shape[1] == 1:
            pair = _pair_cost(G, noise, m_eff, rng if rng is not None else np.random.default_rng(0))
    # one pass per centre; the stat_estimators functions are the reference
    n = G.shape[0]
    dev = G - G.mean(axis=0)
    sq = np.einsum("ij,ij->i", dev, dev)
    l2 = np.sqrt(sq)
    k = (n - 1) // 2
    med = np.partition(G.T, k, axis=1)[:, k]
    l1 = np.abs(G - med).sum(axis=1)
    with np.errstate(over="ignore"):
        exp_l2sq = float(np.mean(np.expm1(4.0 * sq)))
        exp_l1 = float(np.mean(np.expm1(2.0 * l1)))
    return GradientStats(
        n_samples=n,
        source=SampleSource(source),
        variance=float(sq.mean()),
        mmae=float(l1.mean()),
        mean_l2_dev=float(l2.mean()),
        mean_sqrt_l1_dev=float(np.sqrt(l1).mean()),
        exp_l2sq=exp_l2sq,
        exp_l1=exp_l1,
        max_norm=float(np.sqrt(np.einsum("ij,ij->i", G, G)).max()),
        pair_cost=pair,
        gradients=G.copy() if keep else None,
    )


@dataclass
class TrajectoryRecord:
    """Everything the bound engine needs about one run."""

    iterations: list
    stats: list
    schedule: ScheduleKind
    noise: NoiseModel
    domain: DomainSpec
    clip: float | None
    n: int
    dim: int
    algorithm: str = "noisy_sgd"
    partition: list | None = None
    output_selector: OutputSelector = OutputSelector.LAST
    epoch_ends: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.iterations)

    @property
    def diameter(self) -> float:
        return self.domain.diameter(self.dim)

    def prefix(self, T: int) -> "TrajectoryRecord":
        """The record of the same run stopped after ``T`` iterations."""
        if not 0 <= T <= self.T:
            raise ValueError("prefix length out of range")
        return replace(
            self,
            iterations=self.iterations[:T],
            stats=self.stats[:T],
            epoch_ends=[e for e in self.epoch_ends if e <= T],
        )

    def batch_usage(self) -> dict:
        """Mini-batch index -> 1-based iterations that used it (with replacement)."""
        usage: dict = {}
        for cfg in self.iterations:
            usage.setdefault(cfg.batch_index, []).append(cfg.t)
        return usage

    def audit_without_replacement(self) -> bool:
        seen = [i for cfg in self.iterations for i in cfg.batch_ids]
        return len(seen) == len(set(seen))

    def to_rows(self):
        """Flat per-iteration rows for CSV export."""
        for cfg, st in zip(self.iterations, self.stats):
            yield {
                "t": cfg.t,
                "eta": cfg.eta,
                "m": cfg.m,
                "b": cfg.b,
                "beta": cfg.beta,
                "batch_index": cfg.batch_index,
                "variance": st.variance,
                "mmae": st.mmae,
                "mean_l2_dev": st.mean_l2_dev,
                "exp_l2sq": st.exp_l2sq,
            }


class ScheduleExhaustedError(ValueError):
    """A without-replacement schedule asks for more examples than exist."""


@dataclass
class TrainConfig:
    """Knobs of :func:`run_training`.

    ``algorithm`` is ``"noisy_sgd"`` (explicit ``noise_scale``), ``"dp_sgd"``
    (noise magnitude equals the learning rate) or ``"sgld"``.  For SGLD the
    inverse temperature is ``beta_t = beta_scale / (2 * eta_t)`` unless
    ``beta`` is set to a constant.
    """

    algorithm: str = "noisy_sgd"
    schedule: ScheduleKind = ScheduleKind.WITHOUT_REPLACEMENT
    batch_size: int = 50
    iterations: int | None = None
    epochs: int = 1
    learning_rate: LearningRate = field(default_factory=LearningRate)
    noise: NoiseModel = field(default_factory=NoiseModel)
    noise_scale: float = 0.0
    beta: float | None = None
    beta_scale: float = 1e6
    clip: float | None = None
    domain: DomainSpec = field(default_factory=DomainSpec)
    projected_sgld: bool = False
    stats_mode: SampleSource = SampleSource.IN_BATCH
    holdout_size: int = 64
    output: OutputSelector = OutputSelector.LAST
    pair_costs: bool = True
    keep_gradients: bool = False
    stream_key: int = 0

    def __post_init__(self):
        self.schedule = ScheduleKind(self.schedule)
        self.stats_mode = SampleSource(self.stats_mode)
        self.output = OutputSelector(self.output)
        if self.algorithm not in ("noisy_sgd", "dp_sgd", "sgld"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm == "sgld" and NoiseKind(self.noise.kind) is not NoiseKind.GAUSSIAN:
            raise ValueError("SGLD requires Gaussian noise")

    def beta_at(self, eta: float) -> float:
        return self.beta if self.beta is not None else self.beta_scale / (2.0 * eta)

    def noise_magnitude(self, eta: float) -> float:
        if self.algorithm == "dp_sgd":
            return eta
        if self.algorithm == "sgld":
            return math.sqrt(2.0 * eta / self.beta_at(eta))
        return self.noise_scale


def _plan(cfg: TrainConfig, n: int, seed: int):
    """Batch plan: list of (batch index or None, example indices) and epoch ends."""
    b = cfg.batch_size
    perm = stream(seed, Stream.SCHEDULE, cfg.stream_key).permutation(n)
    if cfg.schedule is ScheduleKind.WITHOUT_REPLACEMENT:
        T = cfg.iterations if cfg.iterations is not None else n // b
        if T * b > n:
            raise ScheduleExhaustedError(f"{T} iterations of {b} examples need {T * b} > n={n}")
        plan = [(None, perm[k * b:(k + 1) * b]) for k in range(T)]
        return plan, None, [T] if T else []
    m = n // b
    if m < 1:
        raise ScheduleExhaustedError(f"batch size {b} exceeds n={n}")
    partition = [np.sort(perm[j * b:(j + 1) * b]) for j in range(m)]
    plan, ends = [], []
    for epoch in range(cfg.epochs):
        order = stream(seed, Stream.ORDER, cfg.stream_key, epoch).permutation(m)
        plan.extend((int(j), partition[j]) for j in order)
        ends.append(len(plan))
    if cfg.iterations is not None:
        plan = plan[: cfg.iterations]
        ends = [e for e in ends if e <= len(plan)]
    return plan, partition, ends


def run_training(model, data, config: TrainConfig, seed: int, *, holdout=None,
                 init=None, callback: Callable | None = None, eval_at=None):
    """Train ``model`` on ``data`` and record the trajectory.

    Parameters
    ----------
    model
        A :mod:`noisygen.learning_core` model.
    data : LabeledDataset
    config : TrainConfig
    seed : int
        Root of every random stream used by the run.
    holdout : LabeledDataset, optional
        Fresh examples for ``stats_mode="hold_out"``.
    init : array, optional
        Initial parameter; defaults to a uniform draw over the domain, or the
        model's own initialiser when the domain is unbounded.
    callback : callable, optional
        ``callback(t, params, record)`` once with ``t=0`` before training and
        after every iteration ``t`` listed in ``eval_at``.
    eval_at : iterable of int, optional
        Iterations at which to call ``callback``; defaults to epoch ends.

    Returns
    -------
    params : ndarray
        Selected output (last iterate, average, or the iterate with the
        smallest training cross-entropy, earliest on ties).
    record : TrajectoryRecord

    Raises
    ------
    ScheduleExhaustedError
        When a without-replacement schedule needs more than ``n`` examples.
    """
    n = len(data)
    plan, partition, epoch_ends = _plan(config, n, seed)
    if init is None:
        if config.domain.bounded:
            w = config.domain.sample(model.n_params, stream(seed, Stream.INIT))
        else:
            w = model.init_params(stream(seed, Stream.INIT))
    else:
        w = project(np.asarray(init, dtype=float), config.domain)
    if config.stats_mode is SampleSource.HOLD_OUT and holdout is None:
        raise ValueError("hold_out statistics need a holdout dataset")

    record = TrajectoryRecord(
        iterations=[],
        stats=[],
        schedule=config.schedule,
        noise=config.noise,
        domain=config.domain,
        clip=config.clip,
        n=n,
        dim=model.n_params,
        algorithm=config.algorithm,
        partition=partition,
        output_selector=config.output,
        epoch_ends=[],
    )
    X, y = data.features, data.labels
    # clip in the noise's norm so that K enters the decay coefficient directly
    clip_norm = config.noise.norm
    if callback is not None:
        callback(0, w, record)

    running_sum = np.zeros_like(w)
    best = (math.inf, w)
    step_domain = config.domain
    if config.algorithm == "sgld" and not config.projected_sgld:
        step_domain = DomainSpec()

    ends = set(epoch_ends)
    report = ends if eval_at is None else set(int(t) for t in eval_at)
    for t, (batch_index, idx) in enumerate(plan, start=1):
        eta = config.learning_rate(t)
        m = config.noise_magnitude(eta)
        _, G = model.per_example_grads(w, X[idx], y[idx])
        if config.clip is not None:
            G = clip_rows(G, config.clip, clip_norm)

        if config.stats_mode is SampleSource.HOLD_OUT:
            pick = stream(seed, Stream.HOLDOUT, config.stream_key, t).choice(
                len(holdout), size=min(config.holdout_size, len(holdout)), replace=False)
            _, S = model.per_example_grads(w, holdout.features[pick], holdout.labels[pick])
            if config.clip is not None:
                S = clip_rows(S, config.clip, clip_norm)
        else:
            S = G
        want_pairs = config.pair_costs and config.schedule is ScheduleKind.WITHOUT_REPLACEMENT
        m_eff = m * len(idx) / eta if eta > 0 else math.inf
        stats = gradient_stats(
            S,
            config.stats_mode,
            noise=config.noise if want_pairs and m > 0 else None,
            m_eff=m_eff,
            rng=stream(seed, Stream.PAIRS, config.stream_key, t),
            keep=config.keep_gradients,
        )
        beta = config.beta_at(eta) if config.algorithm == "sgld" else None
        record.iterations.append(IterationConfig(
            t=t, eta=eta, m=m, b=len(idx), batch_ids=tuple(int(i) for i in idx),
            beta=beta, batch_index=batch_index))
        record.stats.append(stats)

        rng = stream(seed, Stream.NOISE, config.stream_key, t - 1)
        w = noisy_step(w, G, eta, m, config.noise, step_domain, rng)

        if config.output is OutputSelector.AVERAGE:
            running_sum += w
        elif config.output is OutputSelector.ARGMIN_LOSS:
            loss = float(model.losses(w, X, y).mean())
            if loss < best[0]:
                best = (loss, w)
        if t in ends:
            record.epoch_ends.append(t)
        if callback is not None and t in report:
            callback(t, w, record)

    if config.output is OutputSelector.AVERAGE and record.T:
        return running_sum / record.T, record
    if config.output is OutputSelector.ARGMIN_LOSS and record.T:
        return best[1], record
    return w, record
