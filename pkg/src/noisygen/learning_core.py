"""Small differentiable classifiers, synthetic data, and gap measurement.

Models are immutable descriptions; parameters live in one flat vector owned by
the caller.  Gradients are exact, written out by hand in reverse mode and
vectorised over examples so per-example gradients come out as a matrix.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "LogisticModel",
    "MLPModel",
    "make_model",
    "LabeledDataset",
    "GapReport",
    "CSVFormatError",
    "surrogate_loss_and_grad",
    "zero_one_loss",
    "cross_entropy",
    "synth_blobs",
    "split",
    "corrupt_labels",
    "measure_gap",
    "load_csv",
    "save_csv",
]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class _DenseNet:
    """Fully connected net with rectifier hidden layers and a softmax head."""

    def __init__(self, n_features: int, hidden: Sequence[int], n_classes: int):
        if n_features < 1 or n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if any(int(h) < 1 for h in hidden):
            raise ValueError("hidden widths must be positive")
        self.n_features = int(n_features)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_classes = int(n_classes)
        sizes = (self.n_features, *self.hidden, self.n_classes)
        self._shapes = list(zip(sizes[:-1], sizes[1:]))
        self._offsets = []
        pos = 0
        for fan_in, fan_out in self._shapes:
            w = (pos, pos + fan_in * fan_out)
            b = (w[1], w[1] + fan_out)
            self._offsets.append((w, b))
            pos = b[1]
        self.n_params = pos

    def __repr__(self):
        return f"{type(self).__name__}({self.n_features}, hidden={self.hidden}, classes={self.n_classes})"

    def __eq__(self, other):
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def _key(self):
        return (self.n_features, self.hidden, self.n_classes)

    def unpack(self, params: np.ndarray):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        layers = []
        for (fan_in, fan_out), ((w0, w1), (b0, b1)) in zip(self._shapes, self._offsets):
            layers.append((params[w0:w1].reshape(fan_in, fan_out), params[b0:b1]))
        return layers

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
        out = np.empty(self.n_params)
        for (fan_in, _), ((w0, w1), (b0, b1)) in zip(self._shapes, self._offsets):
            bound = 1.0 / math.sqrt(fan_in)
            out[w0:w1] = rng.uniform(-bound, bound, w1 - w0)
            out[b0:b1] = rng.uniform(-bound, bound, b1 - b0)
        return out

    def _check_X(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def logits(self, params, X) -> np.ndarray:
        X = self._check_X(X)
        h = X
        layers = self.unpack(params)
        for W, b in layers[:-1]:
            h = np.maximum(h @ W + b, 0.0)
        W, b = layers[-1]
        return h @ W + b

    def predict(self, params, X) -> np.ndarray:
        return np.argmax(self.logits(params, X), axis=1)

    def predict_proba(self, params, X) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(params, X)))

    def losses(self, params, X, y) -> np.ndarray:
        """Per-example cross-entropy."""
        logp = _log_softmax(self.logits(params, X))
        y = np.asarray(y, dtype=int)
        return -logp[np.arange(len(y)), y]

    def per_example_grads(self, params, X, y):
        """Cross-entropy losses and gradients, one gradient row per example.

        The rectifier uses subgradient 0 at the kink.
        """
        X = self._check_X(X)
        y = np.asarray(y, dtype=int)
        n = X.shape[0]
        layers = self.unpack(params)
        acts = [X]
        pre = []
        h = X
        for W, b in layers[:-1]:
            a = h @ W + b
            pre.append(a)
            h = np.maximum(a, 0.0)
            acts.append(h)
        W, b = layers[-1]
        logp = _log_softmax(h @ W + b)
        losses = -logp[np.arange(n), y]
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0

        grads = np.empty((n, self.n_params))
        for k in range(len(layers) - 1, -1, -1):
            (w0, w1), (b0, b1) = self._offsets[k]
            grads[:, w0:w1] = np.einsum("ni,nj->nij", acts[k], delta).reshape(n, -1)
            grads[:, b0:b1] = delta
            if k > 0:
                delta = (delta @ layers[k][0].T) * (pre[k - 1] > 0)
        return losses, grads

    def loss_and_grad(self, params, X, y):
        losses, grads = self.per_example_grads(params, X, y)
        return float(losses.mean()), grads.mean(axis=0)


class LogisticModel(_DenseNet):
    """Multinomial logistic regression (softmax over a linear map)."""

    def __init__(self, n_features: int, n_classes: int = 2):
        super().__init__(n_features, (), n_classes)


class MLPModel(_DenseNet):
    """Multilayer perceptron with rectifier activations."""

    def __init__(self, n_features: int, hidden: Sequence[int] = (16,), n_classes: int = 2):
        if isinstance(hidden, (int, np.integer)):
            hidden = (int(hidden),)
        if len(hidden) == 0:
            raise ValueError("an MLP needs at least one hidden layer; use LogisticModel")
        super().__init__(n_features, hidden, n_classes)


def make_model(kind: str, n_features: int, n_classes: int, hidden=(16,)):
    kind = kind.lower()
    if kind == "logistic":
        return LogisticModel(n_features, n_classes)
    if kind == "mlp":
        return MLPModel(n_features, hidden, n_classes)
    raise ValueError(f"unknown model kind {kind!r}")


def surrogate_loss_and_grad(model, params, example):
    """Cross-entropy loss and gradient for a single ``(x, y)`` example."""
    x, y = example
    losses, grads = model.per_example_grads(params, np.asarray(x, dtype=float)[None, :], [int(y)])
    return float(losses[0]), grads[0]


@dataclass(frozen=True)
class LabeledDataset:
    """Features, integer labels, and provenance for audit.

    ``ids`` are stable example identifiers (row numbers in the generating
    source); train/test disjointness is checked on them.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = "synthetic"
    ids: np.ndarray | None = None
    corruption_alpha: float = 0.0
    corrupted: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    clean_labels: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise ValueError("features must be 2-D")
        if y.shape != (X.shape[0],):
            raise ValueError("features and labels must have the same length")
        if y.size and (not np.issubdtype(y.dtype, np.integer)):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(int)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("labels out of range")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        ids = np.arange(len(y)) if self.ids is None else np.asarray(self.ids, dtype=int)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=int)
        return replace(
            self,
            features=self.features[index],
            labels=self.labels[index],
            ids=self.ids[index],
            corrupted=np.flatnonzero(np.isin(index, self.corrupted)),
            clean_labels=None if self.clean_labels is None else self.clean_labels[index],
        )


def synth_blobs(n: int, dim: int, classes: int, separation: float, seed: int,
                offset=None) -> LabeledDataset:
    """Class-balanced isotropic Gaussian clusters.

    Class centres sit on orthogonal directions (random ones if
    ``classes > dim``) so that every pair of centres is ``separation`` apart;
    points have unit covariance.  ``offset`` shifts every point, which is how
    heterogeneous federated clients are made.
    """
    if n < classes or classes < 2 or dim < 1 or separation < 0:
        raise ValueError("need n >= classes >= 2, dim >= 1, separation >= 0")
    rng = np.random.default_rng(seed)
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = dirs * (separation / math.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % classes)
    X = centres[labels] + rng.standard_normal((n, dim))
    if offset is not None:
        X = X + np.asarray(offset, dtype=float)
    return LabeledDataset(X, labels, classes, provenance=f"synthetic(seed={seed})")


def split(dataset: LabeledDataset, n_first: int):
    """Split into the first ``n_first`` rows and the rest (disjoint by id)."""
    if not 0 <= n_first <= len(dataset):
        raise ValueError("n_first out of range")
    idx = np.arange(len(dataset))
    return dataset.subset(idx[:n_first]), dataset.subset(idx[n_first:])


def corrupt_labels(dataset: LabeledDataset, alpha: float, seed: int) -> LabeledDataset:
    """Give exactly ``floor(alpha * n)`` random examples a different random label."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n = len(dataset)
    k = int(math.floor(alpha * n + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    labels = dataset.labels.copy()
    # a uniform draw over the other C - 1 classes
    bump = rng.integers(1, dataset.n_classes, size=k)
    labels[chosen] = (labels[chosen] + bump) % dataset.n_classes
    return replace(
        dataset,
        labels=labels,
        corruption_alpha=float(alpha),
        corrupted=chosen,
        clean_labels=dataset.labels.copy() if dataset.clean_labels is None else dataset.clean_labels,
    )


def zero_one_loss(model, params, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(model.predict(params, dataset.features) != dataset.labels))


def cross_entropy(model, params, dataset: LabeledDataset) -> float:
    return float(model.losses(params, dataset.features, dataset.labels).mean())


@dataclass
class GapReport:
    """One row of the generalization-gap log."""

    epoch: int
    train_loss: float
    test_loss: float
    bounds: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.test_loss - self.train_loss


def measure_gap(model, params, train: LabeledDataset, test: LabeledDataset,
                eval_loss=zero_one_loss, epoch: int = 0, check_disjoint: bool = True) -> GapReport:
    """Test loss minus train loss under ``eval_loss``.

    Raises ``ValueError`` when the two sets share example ids and come from
    the same source (unless ``check_disjoint`` is off).
    """
    if check_disjoint and train is not test and train.provenance == test.provenance:
        if np.intersect1d(train.ids, test.ids).size:
            raise ValueError("train and test sets overlap")
    return GapReport(epoch, eval_loss(model, params, train), eval_loss(model, params, test))


class CSVFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    """Numeric CSV with a trailing integer label column.

    A first row containing any non-numeric field is treated as a header.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(io.StringIO(text))) if r]
    if rows and not all(_is_number(tok) for tok in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise CSVFormatError("no data rows", line=None)
    width = len(rows[0][1])
    if width < 2:
        raise CSVFormatError("need at least one feature and a label column", rows[0][0])
    feats, labels = [], []
    for line, row in rows:
        if len(row) != width:
            raise CSVFormatError(f"expected {width} fields, got {len(row)}", line)
        try:
            feats.append([float(tok) for tok in row[:-1]])
        except ValueError as exc:
            raise CSVFormatError(f"non-numeric feature ({exc})", line) from None
        label = row[-1].strip()
        try:
            value = float(label)
        except ValueError:
            raise CSVFormatError(f"non-integer label {label!r}", line) from None
        if not value.is_integer() or value < 0:
            raise CSVFormatError(f"non-integer label {label!r}", line)
        labels.append(int(value))
    labels = np.array(labels, dtype=int)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return LabeledDataset(np.array(feats), labels, max(k, 2), provenance=f"csv({Path(path).name})")


def save_csv(dataset: LabeledDataset, path, header: bool = False) -> None:
    """Write features with ``repr`` precision so a reload is bit-exact."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow([f"x{j}" for j in range(dataset.n_features)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
