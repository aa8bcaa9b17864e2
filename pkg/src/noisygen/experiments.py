"""Experiment runners behind the command-line interface.

Each ``cmd_*`` function takes a validated :class:`~noisygen.config.RunConfig`
and returns ``(columns, rows)``; :func:`write_csv` turns that into a file.
Rows are plain dicts and are emitted in a deterministic order, whatever
order the worker pool finishes in.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np
from scipy import stats

from . import bound_engine as be
from .config import ConfigError, RunConfig
from .fed_sim import FedConfig, client_bound, client_gaps, make_client_datasets, run_fed
from .learning_core import (
    corrupt_labels,
    load_csv,
    make_model,
    split,
    synth_blobs,
    zero_one_loss,
)
from .noise_channels import (
    Divergence,
    NoiseModel,
    QuadratureError,
    cost,
    oracle_divergence_1d,
)
from .optimizers import (
    DomainSpec,
    LearningRate,
    ScheduleKind,
    Stream,
    TrainConfig,
    run_training,
    stream,
)
from .stat_estimators import LossAssumption

__all__ = [
    "WORKERS_ENV",
    "build_data",
    "build_model",
    "build_train_config",
    "build_bound_specs",
    "train_rows",
    "cmd_divergence",
    "cmd_train",
    "cmd_fed",
    "cmd_sweep",
    "format_value",
    "write_csv",
    "csv_text",
]

WORKERS_ENV = "NOISYGEN_WORKERS"


def _derived_seed(seed: int, purpose: Stream, *keys: int) -> int:
    return int(stream(seed, purpose, *keys).integers(2**31))


def build_data(cfg: RunConfig, seed: int):
    """Training and test sets for one seed, with label corruption applied.

    When ``data.corrupt_test`` is set the test labels are corrupted at the
    same rate, so that both sets come from the same (noisy) distribution.
    """
    if cfg["data.source"] == "csv":
        if not cfg["data.train_csv"] or not cfg["data.test_csv"]:
            raise ConfigError("csv source needs data.train_csv and data.test_csv", "data.source")
        train, test = load_csv(cfg["data.train_csv"]), load_csv(cfg["data.test_csv"])
        classes = max(train.n_classes, test.n_classes)
        train, test = replace(train, n_classes=classes), replace(test, n_classes=classes)
    else:
        n_train, n_test = cfg["data.n_train"], cfg["data.n_test"]
        if n_train < 2 or n_test < 1:
            raise ConfigError("need at least 2 training and 1 test point", "data.n_train")
        full = synth_blobs(n_train + n_test, cfg["data.dim"], cfg["data.classes"],
                           cfg["data.separation"], _derived_seed(seed, Stream.DATA))
        train, test = split(full, n_train)
    alpha = cfg["data.alpha"]
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("must lie in [0, 1]", "data.alpha")
    if alpha > 0:
        train = corrupt_labels(train, alpha, _derived_seed(seed, Stream.CORRUPT, 0))
        if cfg["data.corrupt_test"]:
            test = corrupt_labels(test, alpha, _derived_seed(seed, Stream.CORRUPT, 1))
    return train, test


def build_model(cfg: RunConfig, n_features: int, n_classes: int):
    hidden = tuple(cfg["model.hidden"])
    if cfg["model.kind"] == "mlp" and (not hidden or min(hidden) < 1):
        raise ConfigError("hidden widths must be positive", "model.hidden")
    return make_model(cfg["model.kind"], n_features, n_classes, hidden=hidden)


def _domain(kind: str, radius, lo=-1.0, hi=1.0) -> DomainSpec:
    if kind == "none" or radius is None:
        return DomainSpec()
    if kind == "l2_ball":
        return DomainSpec.l2_ball(radius)
    if kind == "l1_ball":
        return DomainSpec.l1_ball(radius)
    return DomainSpec.box(lo, hi)


def build_train_config(cfg: RunConfig) -> TrainConfig:
    try:
        noise = NoiseModel(cfg["opt.noise"])
        return TrainConfig(
            algorithm=cfg["opt.algorithm"],
            schedule=ScheduleKind(cfg["opt.schedule"]),
            batch_size=cfg["opt.batch_size"],
            iterations=cfg["opt.iterations"],
            epochs=cfg["opt.epochs"],
            learning_rate=LearningRate(cfg["opt.lr"], cfg["opt.lr_decay"], cfg["opt.lr_decay_steps"],
                                       cfg["opt.lr_staircase"]),
            noise=noise,
            noise_scale=cfg["opt.noise_scale"],
            beta_scale=cfg["opt.beta_scale"],
            clip=cfg["opt.clip"],
            domain=_domain(cfg["opt.domain"], cfg["opt.radius"], cfg["opt.box_lo"], cfg["opt.box_hi"]),
            projected_sgld=cfg["opt.projected_sgld"],
            stats_mode=cfg["opt.stats"],
            holdout_size=cfg["opt.holdout_size"],
            output=cfg["opt.output"],
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "opt") from None


def _assumption(cfg: RunConfig) -> LossAssumption:
    kind, value = cfg["bounds.loss"], cfg["bounds.value"]
    try:
        if kind == "bounded":
            return LossAssumption.bounded(value)
        if kind == "sub_gaussian":
            return LossAssumption.sub_gaussian(value)
        return LossAssumption.finite_variance(value)
    except ValueError as exc:
        raise ConfigError(str(exc), "bounds.value") from None


def build_bound_specs(cfg: RunConfig, n: int) -> list:
    """Parse ``bounds.list`` entries ``method:divergence[:nodecay]``."""
    specs = []
    for entry in cfg["bounds.list"]:
        parts = entry.split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "nodecay"):
            raise ConfigError(f"bad entry {entry!r}; expected method:divergence[:nodecay]", "bounds.list")
        try:
            specs.append(be.BoundSpec(Divergence(parts[1]), _assumption(cfg), n,
                                      use_decay=len(parts) == 2, method=parts[0]))
        except ValueError as exc:
            raise ConfigError(f"{entry!r}: {exc}", "bounds.list") from None
    return specs


def _checkpoints(cfg: RunConfig, tc: TrainConfig, n: int) -> list:
    if tc.schedule is ScheduleKind.WITH_REPLACEMENT:
        per_epoch = n // tc.batch_size
        T = per_epoch * tc.epochs if tc.iterations is None else tc.iterations
        return sorted(set([0] + [min(T, e * per_epoch) for e in range(1, tc.epochs + 1)]))
    T = tc.iterations if tc.iterations is not None else n // tc.batch_size
    k = max(1, cfg["opt.checkpoints"])
    return sorted(set(int(round(i * T / k)) for i in range(k + 1)))


def train_rows(cfg: RunConfig, seed: int) -> list:
    """One row per checkpoint: losses, gap, bounds and a variance summary."""
    train, test = build_data(cfg, seed)
    model = build_model(cfg, train.n_features, max(train.n_classes, test.n_classes))
    tc = build_train_config(cfg)
    specs = build_bound_specs(cfg, len(train))
    holdout = test if tc.stats_mode.value == "hold_out" else None
    at = _checkpoints(cfg, tc, len(train))
    losses = {}

    def observe(t, w, record):
        losses[t] = (zero_one_loss(model, w, train), zero_one_loss(model, w, test))

    w, record = run_training(model, train, tc, seed, holdout=holdout, callback=observe, eval_at=at)
    at = [t for t in at if t <= record.T]
    if record.T:
        losses[record.T] = (zero_one_loss(model, w, train), zero_one_loss(model, w, test))
    curves = {s.label: be.bound_curve(record, s, at) for s in specs}
    variances = np.array([st.variance for st in record.stats])
    per_epoch = len(train) // tc.batch_size
    rows, prev = [], 0
    for i, t in enumerate(at):
        tr, te = losses[t]
        window = variances[prev:t]
        row = {
            "seed": seed,
            "epoch": t // per_epoch if tc.schedule is ScheduleKind.WITH_REPLACEMENT else i,
            "iteration": t,
            "train_loss01": tr,
            "test_loss01": te,
            "gap": te - tr,
        }
        for label, curve in curves.items():
            row[label] = float(curve[i])
        row["variance_mean"] = float(window.mean()) if window.size else math.nan
        row["variance_last"] = float(window[-1]) if window.size else math.nan
        rows.append(row)
        prev = t
    return rows


def _pool_map(fn, tasks):
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def _summaries(rows, keys, value_cols, label_key="seed"):
    """Append mean and std rows per distinct ``keys`` tuple."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups):
        group = groups[key]
        for name, fn in (("mean", np.mean), ("std", lambda a: np.std(a, ddof=1) if len(a) > 1 else 0.0)):
            row = dict(zip(keys, key))
            row[label_key] = name
            for c in value_cols:
                row[c] = float(fn(np.array([g[c] for g in group], dtype=float)))
            out.append(row)
    return out


def cmd_divergence(cfg: RunConfig):
    cols = ["noise", "f", "shift", "m", "closed_form", "oracle", "abs_diff", "exactness"]
    rows = []
    for noise_name in cfg["divergence.noises"]:
        noise = NoiseModel(noise_name)
        for f_name in cfg["divergence.fs"]:
            f = Divergence(f_name)
            for shift in cfg["divergence.shifts"]:
                for m in cfg["divergence.ms"]:
                    closed = cost(f, noise, [shift], [0.0], m)
                    try:
                        oracle = oracle_divergence_1d(f, noise, shift, m)
                    except QuadratureError:
                        oracle = math.nan
                    diff = 0.0 if (math.isinf(closed) and math.isinf(oracle)) else abs(closed - oracle)
                    rows.append({"noise": noise_name, "f": f_name, "shift": shift, "m": m,
                                 "closed_form": float(closed), "oracle": oracle, "abs_diff": diff,
                                 "exactness": closed.exactness.value})
    return cols, rows


def _train_columns(cfg: RunConfig) -> list:
    labels = [s.label for s in build_bound_specs(cfg, 1)]
    return (["seed", "epoch", "iteration", "train_loss01", "test_loss01", "gap"] + labels
            + ["variance_mean", "variance_last"])


def cmd_train(cfg: RunConfig):
    cols = _train_columns(cfg)
    results = _pool_map(train_rows, [(cfg, s) for s in cfg["seeds"]])
    rows = [r for rs in results for r in rs]
    rows.sort(key=lambda r: (r["seed"], r["iteration"]))
    values = [c for c in cols if c not in ("seed", "epoch", "iteration")]
    rows += _summaries(rows, ["epoch", "iteration"], values)
    return cols, rows


def _fed_rows(cfg: RunConfig, seed: int) -> list:
    N = cfg["fed.N"]
    trains, tests = make_client_datasets(N, cfg["fed.n_train"], cfg["fed.n_test"], cfg["data.dim"],
                                         cfg["data.classes"], cfg["data.separation"], cfg["fed.shift"],
                                         _derived_seed(seed, Stream.DATA))
    model = build_model(cfg, cfg["data.dim"], cfg["data.classes"])
    domain = _domain("l2_ball" if cfg["fed.radius"] is not None else "none", cfg["fed.radius"])
    try:
        fc = FedConfig(N=N, C=cfg["fed.C"], T=cfg["fed.T"], M=cfg["fed.M"], eta=cfg["fed.eta"],
                       b=cfg["fed.b"], clip=cfg["fed.clip"], domain=domain, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc), "fed") from None
    traj = run_fed(model, trains, fc)
    gaps = client_gaps(model, traj, trains, tests)
    A = cfg["bounds.value"]
    counts = traj.participation()
    return [{"seed": seed, "client": k, "n_k": len(trains[k]), "rounds": int(counts[k]),
             "bound": client_bound(traj, k, A, len(trains[k])).total, "gap": gaps[k]}
            for k in range(N)]


def cmd_fed(cfg: RunConfig):
    if cfg["bounds.loss"] != "bounded":
        raise ConfigError("the federated bound needs a bounded loss", "bounds.loss")
    cols = ["seed", "client", "n_k", "rounds", "bound", "gap"]
    results = _pool_map(_fed_rows, [(cfg, s) for s in cfg["seeds"]])
    rows = sorted((r for rs in results for r in rs), key=lambda r: (r["seed"], r["client"]))
    rows += _summaries(rows, ["client"], ["n_k", "rounds", "bound", "gap"])
    return cols, rows


def _sweep_point(cfg: RunConfig, value: float) -> RunConfig:
    axis = cfg["sweep.axis"]
    if axis == "corruption":
        return cfg.updated(data__alpha=value)
    if axis == "width":
        return cfg.updated(model__hidden=[int(value)])
    if axis == "n":
        return cfg.updated(data__n_train=int(value))
    return cfg.updated(opt__noise_scale=value)


def _sweep_task(cfg: RunConfig, value: float, seed: int):
    final = train_rows(_sweep_point(cfg, value), seed)[-1]
    final["value"] = value
    return final


def cmd_sweep(cfg: RunConfig):
    """Final-checkpoint summary per sweep value and seed, with rank correlations.

    ``spearman_<col>`` on the mean rows is the rank correlation between the
    sweep value and the seed-averaged column.
    """
    base = _train_columns(cfg)
    values = [c for c in base if c not in ("seed", "epoch", "iteration")]
    tasks = [(cfg, v, s) for v in cfg["sweep.values"] for s in cfg["seeds"]]
    rows = _pool_map(_sweep_task, tasks)
    for r in rows:
        r["axis"] = cfg["sweep.axis"]
    rows.sort(key=lambda r: (r["value"], r["seed"]))
    summary = _summaries(rows, ["axis", "value"], values)
    means = [r for r in summary if r["seed"] == "mean"]
    rho_cols = []
    for c in values:
        if c in ("variance_mean", "variance_last"):
            continue
        name = f"spearman_{c}"
        rho_cols.append(name)
        xs = [r["value"] for r in means]
        ys = [r[c] for r in means]
        # undefined for a constant column
        defined = len(xs) > 1 and np.ptp(np.asarray(ys, dtype=float)) > 0
        rho = float(stats.spearmanr(xs, ys).statistic) if defined else math.nan
        for r in means:
            r[name] = rho
    cols = ["axis", "value", "seed", "epoch", "iteration"] + values + rho_cols
    return cols, rows + summary


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def csv_text(cols, rows, timestamp: bool = False) -> str:
    buf = io.StringIO()
    if timestamp:
        buf.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in cols])
    return buf.getvalue()


def write_csv(path, cols, rows, timestamp: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(cols, rows, timestamp))
