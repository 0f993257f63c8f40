"""Training protocol, the sklearn-style classifier and evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_labels
from .dataset import Dataset, DomainTag, OutputClass, SourceClass, Split, check_disjoint
from .dataset import stratified_split
from .exceptions import ClassMismatch, ConfigError, DataError, LeakageDetected
from .nn import AdamState, ModelSpec, Network, adam_step
from .preprocess import FeaturePipeline, NormScheme, parse_domain

log = logging.getLogger(__name__)

N_CLASSES = 4
LABELS = tuple(OutputClass)

PAPER_BATCH_SIZE = 64
PAPER_LR = 1e-4
PAPER_N_SEEDS = 15
PAPER_SPLIT = 0.8


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Five-layer 1-D CNN with a 512-unit MLP head, trained with ADAM.

    Parameters
    ----------
    channels : tuple of 5 ints
        Output channels of the convolution layers.
    kernel_size, stride : int
        Shared by all convolution layers (valid padding).
    pool_window : int, "auto" or "global"
        Average pooling window after the last convolution.
    hidden_units : int
        Width of the dense ReLU layer.
    batch_size : int
        Mini-batch size; the last batch of an epoch may be smaller.
    learning_rate : float
        ADAM step size.
    epochs : int
        Number of passes over the training data. The parameters with the
        lowest mean training loss over an epoch are kept.
    random_state : int
        Seeds both the weight initialisation and the per-epoch shuffling.
    dtype : {"float32", "float64"}

    Attributes
    ----------
    network_ : Network
    loss_curve_ : list of float
        Mean training loss of every epoch.
    best_epoch_ : int
    classes_ : ndarray of shape (4,)
    """

    def __init__(
        self,
        channels=(16, 32, 64, 64, 128),
        kernel_size=9,
        stride=3,
        pool_window="auto",
        hidden_units=512,
        batch_size=PAPER_BATCH_SIZE,
        learning_rate=PAPER_LR,
        epochs=30,
        random_state=0,
        dtype="float32",
        verbose=0,
    ):
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pool_window = pool_window
        self.hidden_units = hidden_units
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def _spec(self, input_length: int) -> ModelSpec:
        return ModelSpec(input_length, tuple(self.channels), self.kernel_size, self.stride,
                         self.pool_window, self.hidden_units)

    def fit(self, X, y, callback: Callable[[int, float], None] | None = None):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if np.shape(X)[:1] == (0,):
            raise DataError("cannot train on an empty training set")
        X = check_features(X, dtype=np.dtype(self.dtype))
        y = check_labels(y, X.shape[0], N_CLASSES)
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = X.shape[1]
        seed = int(self.random_state)
        net = Network(self._spec(X.shape[1]), init_seed=seed, dtype=np.dtype(self.dtype))
        state = AdamState.for_params(net.parameters(), lr=self.learning_rate)
        shuffle = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        params = net.parameters()
        best_loss, best_params, best_epoch = np.inf, [p.copy() for p in params], -1
        curve = []
        n = X.shape[0]
        for epoch in range(self.epochs):
            order = shuffle.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start: start + self.batch_size]
                loss, grads = net.loss_and_grads(X[idx], y[idx])
                adam_step(params, grads, state)
                total += loss * len(idx)
            epoch_loss = total / n
            curve.append(epoch_loss)
            if epoch_loss < best_loss:
                best_loss, best_epoch = epoch_loss, epoch
                best_params = [p.copy() for p in params]
            if callback is not None:
                callback(epoch, epoch_loss)
            if self.verbose:
                log.info("epoch %d loss %.5f", epoch, epoch_loss)
        net.set_parameters(best_params)
        self.network_ = net
        self.loss_curve_ = curve
        self.best_epoch_ = best_epoch
        return self

    def predict_proba(self, X, batch_size: int = 256):
        check_is_fitted(self, "network_")
        X = check_features(X, n_features=self.n_features_in_, dtype=np.dtype(self.dtype))
        out = [self.network_.predict_proba(X[i: i + batch_size])
               for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, N_CLASSES))

    def predict(self, X):
        # np.argmax returns the first maximum, so ties go to the lowest class index
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = PAPER_BATCH_SIZE
    lr: float = PAPER_LR
    epochs: int = 30
    n_seeds: int = PAPER_N_SEEDS
    split_fraction: float = PAPER_SPLIT
    scheme: NormScheme = NormScheme.MEASUREMENT
    domain: DomainTag = DomainTag.TIME
    n_fft: int | None = None
    fft_first: bool = True
    channels: tuple[int, ...] = (16, 32, 64, 64, 128)
    kernel_size: int = 9
    stride: int = 3
    pool_window: int | str = "auto"
    hidden_units: int = 512
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", NormScheme.parse(self.scheme))
        object.__setattr__(self, "domain", parse_domain(self.domain))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def seeds(self) -> list[int]:
        """Run seeds; run ``i`` uses its seed for the split, the init and the shuffling."""
        return [self.master_seed + i for i in range(self.n_seeds)]

    def classifier(self, seed: int) -> CNNClassifier:
        return CNNClassifier(self.channels, self.kernel_size, self.stride, self.pool_window,
                             self.hidden_units, self.batch_size, self.lr, self.epochs, seed)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["domain"] = self.domain.name.lower()
        d["channels"] = ",".join(map(str, self.channels))
        return d


@dataclass
class TrainedModel:
    """A fitted feature pipeline together with the classifier trained on its output."""

    features: FeaturePipeline
    classifier: CNNClassifier
    train_ids: np.ndarray
    seed: int

    def predict(self, d: Dataset) -> np.ndarray:
        if len(d) == 0:
            return np.zeros(0, dtype=np.int64)
        return self.classifier.predict(self.features.transform(d))

    def check_unseen(self, d: Dataset, what: str = "test") -> None:
        overlap = np.intersect1d(self.train_ids, d.ids)
        if overlap.size:
            raise LeakageDetected(
                f"{overlap.size} {what} id(s) were used for training, e.g. {int(overlap[0])}"
            )


def train(split: Split | Dataset, cfg: TrainConfig, seed: int,
          class_stats_from: Dataset | None = None) -> TrainedModel:
    """Fit the preprocessing on the training records only, then the network.

    ``class_stats_from`` only provides class-normalization ranges for source
    classes that are deliberately kept out of training.
    """
    train_set = split.train if isinstance(split, Split) else split
    if len(train_set) == 0:
        raise DataError("cannot train on an empty training set")
    features = FeaturePipeline(cfg.scheme, cfg.domain, cfg.n_fft, cfg.fft_first).fit(
        train_set, class_stats_from)
    X = features.transform(train_set)
    clf = cfg.classifier(seed).fit(X, train_set.y)
    return TrainedModel(features, clf, np.array(train_set.ids), seed)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with ground truth along rows and predictions along columns."""

    counts: np.ndarray
    labels: tuple[OutputClass, ...] = LABELS

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if counts.shape != (k, k):
            raise ClassMismatch(f"expected a {k}x{k} matrix, got shape {counts.shape}")
        if np.any(counts < 0):
            raise DataError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_predictions(cls, y_true, y_pred, labels=LABELS) -> "ConfusionMatrix":
        k = len(labels)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts, tuple(labels))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rates(self) -> np.ndarray:
        """Row-normalized rates; rows without records are NaN."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / rows, np.nan)

    def true_positive_rates(self) -> np.ndarray:
        return np.diag(self.rates())

    def mean_true_positive_rate(self) -> float:
        return float(np.nanmean(self.true_positive_rates()))

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


def evaluate(model: TrainedModel, test: Dataset) -> ConfusionMatrix:
    model.check_unseen(test)
    return ConfusionMatrix.from_predictions(test.y, model.predict(test))


def generalization_rate(model: TrainedModel, holdout: Dataset) -> float:
    """Share of ``holdout`` records classified as the holdout's output class."""
    classes = set(holdout.sources)
    if len(classes) != 1:
        raise DataError(f"holdout must hold exactly one source class, got {len(classes)}")
    model.check_unseen(holdout, "holdout")
    target = int(next(iter(classes)).output_class)
    return float(np.mean(model.predict(holdout) == target))


@dataclass
class MetricsReport:
    """Across-run averages of row-normalized confusion matrices.

    ``a_tilde`` is the record-weighted mean of the trained-class rate and the
    holdout rate. All raw values are kept so the combination can be redone.
    """

    mean_rates: np.ndarray
    per_class: np.ndarray
    a_bar: float
    run_a_bar: list[float]
    run_rates: list[np.ndarray]
    g: float | None = None
    run_g: list[float] = field(default_factory=list)
    a_tilde: float | None = None
    n_test: int = 0
    n_holdout: int = 0
    labels: tuple[OutputClass, ...] = LABELS

    @property
    def n_runs(self) -> int:
        return len(self.run_rates)

    def to_dict(self) -> dict:
        names = [c.short for c in self.labels]
        return {
            "n_runs": self.n_runs,
            "labels": names,
            "A": dict(zip(names, _floats(self.per_class))),
            "A_bar": _float(self.a_bar),
            "G": _float(self.g),
            "A_tilde": _float(self.a_tilde),
            "run_A_bar": _floats(self.run_a_bar),
            "run_G": _floats(self.run_g),
            "mean_rates": [_floats(r) for r in self.mean_rates],
            "n_test": self.n_test,
            "n_holdout": self.n_holdout,
        }


def _float(v):
    return None if v is None or np.isnan(v) else round(float(v), 12)


def _floats(vs):
    return [_float(v) for v in vs]


def aggregate(runs: Sequence[ConfusionMatrix], g_runs: Sequence[float] = (),
              n_holdout: int = 0) -> MetricsReport:
    """Elementwise mean of the runs' row-normalized matrices."""
    runs = list(runs)
    if not runs:
        raise ValueError("aggregate needs at least one run")
    labels = runs[0].labels
    if any(r.labels != labels for r in runs):
        raise ClassMismatch("runs use different class sets")
    rates = [r.rates() for r in runs]
    # sorted summation keeps the mean independent of run order; a run with
    # no records of a class does not count towards that row
    stacked = np.sort(np.stack(rates), axis=0)
    defined = np.sum(~np.isnan(stacked), axis=0)
    with np.errstate(invalid="ignore"):
        mean_rates = np.where(defined > 0, np.nansum(stacked, axis=0) / defined, np.nan)
    per_class = np.diag(mean_rates)
    a_bar = float(np.nanmean(per_class)) if np.any(~np.isnan(per_class)) else float("nan")
    g = float(np.sum(np.sort(np.asarray(g_runs, dtype=float))) / len(g_runs)) if len(g_runs) else None
    n_test = int(round(np.mean([r.total for r in runs])))
    a_tilde = None
    if g is not None:
        a_tilde = (n_test * a_bar + n_holdout * g) / (n_test + n_holdout) if (n_test + n_holdout) else None
    return MetricsReport(mean_rates, per_class, a_bar,
                         [r.mean_true_positive_rate() for r in runs], rates,
                         g, list(g_runs), a_tilde, n_test, n_holdout, labels)


@dataclass
class RunResult:
    seed: int
    confusion: ConfusionMatrix
    g: float | None
    n_train: int
    n_holdout: int


def _one_run(data: Dataset, train_classes: Sequence[SourceClass], holdout: SourceClass | None,
             cfg: TrainConfig, seed: int, checkpoint_dir=None) -> RunResult:
    classes = list(train_classes) + ([holdout] if holdout is not None else [])
    split = stratified_split(data.select(classes), cfg.split_fraction, seed)
    train_set = split.train.select(train_classes)
    test_set = split.test.select(train_classes)
    # the holdout's train share is never trained on; it only fixes its class range
    unseen_train = split.train.select([holdout]) if holdout is not None else None
    model = train(train_set, cfg, seed, class_stats_from=unseen_train)
    cm = evaluate(model, test_set)
    g, n_holdout = None, 0
    if holdout is not None:
        holdout_set = split.test.select([holdout])
        # the holdout class must never reach a training set
        if holdout in set(train_set.sources):
            raise LeakageDetected(f"holdout class {holdout} present in the training set")
        check_disjoint(train_set, holdout_set, "holdout")
        g = generalization_rate(model, holdout_set)
        n_holdout = len(holdout_set)
    if checkpoint_dir is not None:
        from .nn import save_checkpoint
        save_checkpoint(model.classifier.network_, f"{checkpoint_dir}/model_seed{seed}.pdnn")
    return RunResult(seed, cm, g, len(train_set), n_holdout)


def run_seeds(data: Dataset, train_classes: Sequence[SourceClass], cfg: TrainConfig,
              holdout: SourceClass | None = None, n_jobs: int = 1,
              progress: Callable[[str], None] | None = None) -> tuple[MetricsReport, list[RunResult]]:
    """Train and evaluate once per seed, re-drawing the split each time.

    Every run re-splits the selected classes 80/20 per source class; the
    holdout class's test share is used to measure the generalization rate.
    """
    present = set(data.sources)
    missing = [c for c in list(train_classes) + ([holdout] if holdout else []) if c not in present]
    if missing:
        from .exceptions import MissingClass
        raise MissingClass(f"dataset lacks source class(es) {', '.join(map(str, missing))}")
    if holdout is not None and holdout in set(train_classes):
        raise LeakageDetected(f"holdout class {holdout} is listed as a training class")
    seeds = cfg.seeds()
    if n_jobs != 1 and len(seeds) > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_run)(data, train_classes, holdout, cfg, s) for s in seeds)
    else:
        results = []
        for s in seeds:
            results.append(_one_run(data, train_classes, holdout, cfg, s))
            if progress is not None:
                progress(f"seed {s}: A_bar={results[-1].confusion.mean_true_positive_rate():.4f}"
                         + (f" G={results[-1].g:.4f}" if results[-1].g is not None else ""))
    report = aggregate([r.confusion for r in results],
                       [r.g for r in results if r.g is not None],
                       n_holdout=int(round(np.mean([r.n_holdout for r in results]))))
    return report, results


def metrics_csv(report: MetricsReport, results: Sequence[RunResult] | None = None) -> str:
    """``run_id,class,A`` rows per run and class, then ``mean`` summary rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "class", "A"])
    for i, rates in enumerate(report.run_rates):
        run_id = results[i].seed if results else i
        for c, a in zip(report.labels, np.diag(rates)):
            w.writerow([run_id, c.short, _fmt(a)])
        w.writerow([run_id, "A_bar", _fmt(report.run_a_bar[i])])
        if report.run_g:
            w.writerow([run_id, "G", _fmt(report.run_g[i])])
    for c, a in zip(report.labels, report.per_class):
        w.writerow(["mean", c.short, _fmt(a)])
    w.writerow(["mean", "A_bar", _fmt(report.a_bar)])
    if report.g is not None:
        w.writerow(["mean", "G", _fmt(report.g)])
        w.writerow(["mean", "A_tilde", _fmt(report.a_tilde)])
    return buf.getvalue()


def metrics_json(report: MetricsReport, extra: dict | None = None) -> str:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    return "nan" if v is None or np.isnan(v) else f"{float(v):.6f}"


def paper_train_config(**overrides) -> TrainConfig:
    """Protocol values used for full-size runs."""
    return replace(TrainConfig(batch_size=PAPER_BATCH_SIZE, lr=PAPER_LR, n_seeds=PAPER_N_SEEDS,
                               split_fraction=PAPER_SPLIT), **overrides)
