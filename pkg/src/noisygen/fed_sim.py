"""Federated averaging with local DP-SGD, and the per-client bound.

Each round the server picks ``C`` of ``N`` clients uniformly without
replacement; every chosen client starts from the broadcast parameter, runs
``M`` projected DP-SGD steps on fresh points of its own data, and the server
averages the results.  Client ``k`` draws its data order from stream
``(seed, SCHEDULE, k)`` and its noise from ``(seed, NOISE, k, step)``, which
with ``C = N = 1`` is exactly the stream layout of a single
:func:`~noisygen.optimizers.run_training` run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bound_engine import BoundReport
from .learning_core import split, synth_blobs, zero_one_loss
from .noise_channels import Exactness, NoiseKind, NoiseModel, gaussian_ccdf
from .optimizers import (
    DomainSpec,
    ScheduleExhaustedError,
    Stream,
    clip_rows,
    gradient_stats,
    noisy_step,
    project,
    stream,
)

__all__ = [
    "FedConfig",
    "FedTrajectory",
    "LocalStep",
    "run_fed",
    "fed_q",
    "client_bound",
    "make_client_datasets",
    "client_gaps",
]


@dataclass(frozen=True)
class FedConfig:
    N: int = 4
    C: int = 2
    T: int = 4
    M: int = 5
    eta: float = 0.1
    b: int = 10
    clip: float | None = 1.0
    domain: DomainSpec = field(default_factory=DomainSpec)
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if not 1 <= self.C <= self.N:
            raise ValueError("need 1 <= C <= N")
        if min(self.T, self.M, self.b) < 1:
            raise ValueError("T, M and b must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if NoiseKind(self.noise.kind) is not NoiseKind.GAUSSIAN:
            raise ValueError("federated DP-SGD uses Gaussian noise")


@dataclass(frozen=True)
class LocalStep:
    round: int
    client: int
    step: int
    mean_l2_dev: float
    batch_ids: tuple


@dataclass
class FedTrajectory:
    config: FedConfig
    dim: int
    selected: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    iterates: list = field(default_factory=list)

    def rounds_of(self, k: int) -> list:
        """1-based rounds in which client ``k`` was selected."""
        return [t for t, s in enumerate(self.selected, start=1) if k in s]

    def participation(self) -> np.ndarray:
        counts = np.zeros(self.config.N, dtype=int)
        for s in self.selected:
            counts[list(s)] += 1
        return counts

    def to_rows(self):
        """(round, client, local step, statistic, q-exponent) rows."""
        cfg = self.config
        for st in self.steps:
            yield {
                "round": st.round,
                "client": st.client,
                "local_step": st.step,
                "mean_l2_dev": st.mean_l2_dev,
                "q_exponent": cfg.M * (cfg.T + 1 - st.round) - st.step,
            }


def run_fed(model, client_datasets, config: FedConfig, init=None) -> FedTrajectory:
    """Execute federated averaging with local DP-SGD.

    Parameters
    ----------
    model
        Shared model architecture.
    client_datasets : sequence of LabeledDataset
        One training set per client (``len == config.N``).
    config : FedConfig
    init : array, optional
        Initial broadcast parameter; defaults to the same draw that
        :func:`~noisygen.optimizers.run_training` makes for this seed.

    Returns
    -------
    FedTrajectory
        ``iterates[t]`` is the global parameter after round ``t``
        (``iterates[0]`` is the initial one).

    Raises
    ------
    ScheduleExhaustedError
        When a client runs out of unused points.
    """
    cfg = config
    if len(client_datasets) != cfg.N:
        raise ValueError(f"expected {cfg.N} client datasets, got {len(client_datasets)}")
    seed = cfg.seed
    if init is None:
        if cfg.domain.bounded:
            w = cfg.domain.sample(model.n_params, stream(seed, Stream.INIT))
        else:
            w = model.init_params(stream(seed, Stream.INIT))
    else:
        w = project(np.asarray(init, dtype=float), cfg.domain)

    orders = [stream(seed, Stream.SCHEDULE, k).permutation(len(d)) for k, d in enumerate(client_datasets)]
    cursor = [0] * cfg.N
    local_count = [0] * cfg.N
    traj = FedTrajectory(cfg, model.n_params, iterates=[w.copy()])

    for t in range(1, cfg.T + 1):
        chosen = np.sort(stream(seed, Stream.SELECT, t).choice(cfg.N, size=cfg.C, replace=False))
        traj.selected.append(tuple(int(k) for k in chosen))
        locals_ = []
        for k in chosen:
            data = client_datasets[k]
            wk = w.copy()
            for j in range(1, cfg.M + 1):
                if cursor[k] + cfg.b > len(data):
                    raise ScheduleExhaustedError(f"client {k} ran out of fresh points in round {t}")
                idx = orders[k][cursor[k]:cursor[k] + cfg.b]
                cursor[k] += cfg.b
                _, G = model.per_example_grads(wk, data.features[idx], data.labels[idx])
                if cfg.clip is not None:
                    G = clip_rows(G, cfg.clip, cfg.noise.norm)
                dev = gradient_stats(G).mean_l2_dev if len(idx) > 1 else 0.0
                traj.steps.append(LocalStep(t, int(k), j, dev, tuple(int(i) for i in idx)))
                rng = stream(seed, Stream.NOISE, k, local_count[k])
                local_count[k] += 1
                wk = noisy_step(wk, G, cfg.eta, cfg.eta, cfg.noise, cfg.domain, rng)
            locals_.append(wk)
        w = np.mean(np.stack(locals_), axis=0)
        traj.iterates.append(w.copy())
    return traj


def fed_q(config: FedConfig, dim: int) -> float:
    """Per-step decay coefficient ``1 - 2 Phi_bar(sqrt(C) (D + 2 eta K) / (2 eta))``."""
    D = config.domain.diameter(dim)
    K = math.inf if config.clip is None else config.clip
    if not (math.isfinite(D) and math.isfinite(K)) or config.eta <= 0:
        return 1.0
    x = math.sqrt(config.C) * (D + 2.0 * config.eta * K) / (2.0 * config.eta)
    return float(1.0 - 2.0 * gaussian_ccdf(x))


def client_bound(traj: FedTrajectory, k: int, A: float, n_k: int, use_decay: bool = True) -> BoundReport:
    """Generalization bound of client ``k`` for a loss bounded in ``[0, A]``.

    Sums ``(A / n_k) E||g - e||_2 q^(M (T + 1 - t) - j)`` over the rounds the
    client took part in and their local steps; a client never selected
    leaked nothing and gets 0.
    """
    cfg = traj.config
    if not 0 <= k < cfg.N:
        raise ValueError("client index out of range")
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    q = fed_q(cfg, traj.dim) if use_decay else 1.0
    terms, factors = [], []
    for st in traj.steps:
        if st.client != k:
            continue
        e = cfg.M * (cfg.T + 1 - st.round) - st.step
        factors.append(q**e)
        terms.append(A / n_k * st.mean_l2_dev * factors[-1])
    total = float(np.sum(terms)) if terms else 0.0
    return BoundReport(total, tuple(terms), tuple(factors), Exactness.EXACT, f"fed_client_{k}")


def make_client_datasets(N: int, n_train: int, n_test: int, dim: int, classes: int,
                         separation: float, shift: float, seed: int):
    """Heterogeneous clients: each has its own blob draw plus a mean shift.

    Returns ``(train_sets, test_sets)``; each client's test set comes from
    the same distribution as its training set.
    """
    trains, tests = [], []
    for k in range(N):
        rng = stream(seed, Stream.DATA, k)
        offset = shift * rng.standard_normal(dim)
        full = synth_blobs(n_train + n_test, dim, classes, separation, int(rng.integers(2**31)),
                           offset=offset)
        tr, te = split(full, n_train)
        trains.append(tr)
        tests.append(te)
    return trains, tests


def client_gaps(model, traj: FedTrajectory, trains, tests) -> list:
    """0-1 generalization gap of the final global parameter on every client."""
    w = traj.iterates[-1]
    return [zero_one_loss(model, w, te) - zero_one_loss(model, w, tr) for tr, te in zip(trains, tests)]
