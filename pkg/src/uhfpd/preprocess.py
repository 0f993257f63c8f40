"""Min-max normalization schemes and FFT magnitude features.

All three schemes use the affine map ``2 * (s - lo) / (hi - lo) - 1`` and
differ only in where ``(lo, hi)`` come from: the whole training set, the
training records of the record's own source class, or the record itself.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_sources
from .dataset import Dataset, DomainTag, Measurement, SourceClass
from .exceptions import BadLength, ConfigError, DegenerateRange, UnknownClass


class NormScheme(enum.Enum):
    TRAINSET = "trainset"
    CLASS = "class"
    MEASUREMENT = "measurement"

    @property
    def short(self) -> str:
        return {"trainset": "Tr", "class": "Cl", "measurement": "Me"}[self.value]

    @classmethod
    def parse(cls, value) -> "NormScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for scheme in cls:
            if key in (scheme.value, scheme.short.lower()):
                return scheme
        raise ConfigError(f"unknown normalization scheme {value!r}")


def parse_domain(value) -> DomainTag:
    if isinstance(value, DomainTag):
        return value
    key = str(value).strip().lower()
    if key in ("time", "td"):
        return DomainTag.TIME
    if key in ("fft", "freq", "frequency"):
        return DomainTag.FREQ
    raise ConfigError(f"unknown input domain {value!r}")


@dataclass(frozen=True)
class NormStats:
    scheme: NormScheme
    global_min: float | None = None
    global_max: float | None = None
    per_class: dict[SourceClass, tuple[float, float]] = field(default_factory=dict)

    def range_for(self, source: SourceClass | None) -> tuple[float, float]:
        if self.scheme is NormScheme.TRAINSET:
            return self.global_min, self.global_max
        if self.scheme is NormScheme.CLASS:
            try:
                return self.per_class[source]
            except KeyError:
                raise UnknownClass(f"no class statistics for source class {source}") from None
        raise ValueError("measurement normalization carries no fitted range")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    domain_tag: DomainTag = DomainTag.TIME

    def __len__(self) -> int:
        return len(self.values)

    @property
    def length(self) -> int:
        return len(self.values)


def _checked_range(lo: float, hi: float, what: str) -> tuple[float, float]:
    if not hi > lo:
        raise DegenerateRange(f"{what} has max == min ({lo})")
    return float(lo), float(hi)


def fit_stats(X: np.ndarray, scheme, sources: Sequence[SourceClass] | None = None) -> NormStats:
    """Fit normalization statistics on the rows of ``X`` (training data only)."""
    scheme = NormScheme.parse(scheme)
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("cannot fit normalization on an empty training set")
    if scheme is NormScheme.MEASUREMENT:
        return NormStats(scheme)
    if scheme is NormScheme.TRAINSET:
        lo, hi = _checked_range(X.min(), X.max(), "training set")
        return NormStats(scheme, lo, hi)
    sources = check_sources(sources, X.shape[0])
    row_min = X.min(axis=1)
    row_max = X.max(axis=1)
    per_class = {}
    for sc in sorted(set(sources)):
        rows = np.array([s == sc for s in sources])
        per_class[sc] = _checked_range(row_min[rows].min(), row_max[rows].max(), f"class {sc}")
    return NormStats(scheme, per_class=per_class)


def apply_stats(X: np.ndarray, stats: NormStats,
                sources: Sequence[SourceClass] | None = None) -> np.ndarray:
    """Normalize every row of ``X``; no clipping is applied."""
    X = np.asarray(X, dtype=np.float64)
    if stats.scheme is NormScheme.MEASUREMENT:
        lo = X.min(axis=1, keepdims=True)
        hi = X.max(axis=1, keepdims=True)
        if np.any(hi <= lo):
            raise DegenerateRange("measurement normalization of a constant record")
    elif stats.scheme is NormScheme.TRAINSET:
        lo, hi = stats.global_min, stats.global_max
    else:
        sources = check_sources(sources, X.shape[0])
        ranges = np.array([stats.range_for(s) for s in sources]).reshape(-1, 2)
        lo, hi = ranges[:, :1], ranges[:, 1:]
    return 2.0 * (X - lo) / (hi - lo) - 1.0


def fit_norm(train: Dataset, scheme) -> NormStats:
    return fit_stats(train.samples, scheme, train.sources)


def apply_norm(m: Measurement | FeatureVector | np.ndarray, stats: NormStats,
               source: SourceClass | None = None) -> FeatureVector:
    """Normalize one record. ``source`` is taken from ``m`` when it is a Measurement."""
    if isinstance(m, Measurement):
        values, tag, source = m.samples, DomainTag.TIME, m.source
    elif isinstance(m, FeatureVector):
        values, tag = m.values, m.domain_tag
    else:
        values, tag = m, DomainTag.TIME
    row = np.asarray(values, dtype=np.float64)[None]
    out = apply_stats(row, stats, None if source is None else [source])[0]
    return FeatureVector(out, tag)


# -- FFT ---------------------------------------------------------------------

def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along the last axis.

    ``X[k] = sum_t x[t] * exp(-2j*pi*k*t/n)``; the length must be a power of two.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise BadLength(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    out = x[..., _bit_reverse_indices(n)]
    half = 1
    while half < n:
        blocks = out.reshape(*lead, n // (2 * half), 2, half)
        twiddle = np.exp(-2j * np.pi * np.arange(half) / (2 * half))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * twiddle
        out = np.stack((even + odd, even - odd), axis=-2).reshape(*lead, n)
        half *= 2
    return out


def magnitude_spectrum(X: np.ndarray, n_fft: int | None = None) -> np.ndarray:
    """One-sided magnitude spectra (``n_fft // 2 + 1`` bins) of the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    length = X.shape[-1]
    if n_fft is None:
        n_fft = next_power_of_two(length)
    if not is_power_of_two(n_fft) or n_fft < length:
        raise BadLength(f"n_fft={n_fft} must be a power of two >= signal length {length}")
    padded = np.zeros(X.shape[:-1] + (n_fft,))
    padded[..., :length] = X
    return np.abs(fft(padded)[..., : n_fft // 2 + 1])


def fft_features(f: FeatureVector | np.ndarray, n_fft: int | None = None) -> FeatureVector:
    if isinstance(f, FeatureVector):
        if f.domain_tag is not DomainTag.TIME:
            raise BadLength("fft_features expects a time-domain feature vector")
        values = f.values
    else:
        values = f
    return FeatureVector(magnitude_spectrum(values, n_fft), DomainTag.FREQ)


# -- estimators --------------------------------------------------------------

class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Scale records to [-1, 1] with trainset, class or measurement statistics.

    Parameters
    ----------
    scheme : {"trainset", "class", "measurement"}
        Scope over which the min/max pair is taken. ``"class"`` needs the
        source class of every row, passed as ``sources`` to both ``fit`` and
        ``transform``.

    Attributes
    ----------
    stats_ : NormStats
    """

    def __init__(self, scheme="measurement"):
        self.scheme = scheme

    def fit(self, X, y=None, sources=None):
        X = check_features(X)
        self.stats_ = fit_stats(X, self.scheme, sources)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, sources=None):
        check_is_fitted(self, "stats_")
        X = check_features(X, n_features=self.n_features_in_)
        return apply_stats(X, self.stats_, sources)

    def fit_transform(self, X, y=None, sources=None):
        return self.fit(X, y, sources=sources).transform(X, sources=sources)


class FFTMagnitude(TransformerMixin, BaseEstimator):
    """Zero-padded one-sided FFT magnitude spectrum of each row.

    ``n_fft=None`` uses the next power of two at or above the row length.
    """

    def __init__(self, n_fft=None):
        self.n_fft = n_fft

    def fit(self, X, y=None):
        X = check_features(X)
        self.n_features_in_ = X.shape[1]
        self.n_fft_ = self.n_fft or next_power_of_two(X.shape[1])
        if not is_power_of_two(self.n_fft_) or self.n_fft_ < X.shape[1]:
            raise BadLength(f"n_fft={self.n_fft_} must be a power of two >= {X.shape[1]}")
        return self

    def transform(self, X):
        check_is_fitted(self, "n_fft_")
        X = check_features(X, n_features=self.n_features_in_)
        return magnitude_spectrum(X, self.n_fft_)


@dataclass
class FeaturePipeline:
    """Fitted train-only preprocessing shared by a training run and its evaluations.

    With ``domain=FREQ`` the magnitude spectrum is taken first and the
    normalization statistics are fitted on spectra; ``fft_first=False``
    normalizes the time signal before the transform instead.
    """

    scheme: NormScheme
    domain: DomainTag = DomainTag.TIME
    n_fft: int | None = None
    fft_first: bool = True
    normalizer: MinMaxNormalizer | None = None
    _fft: FFTMagnitude | None = None

    def __post_init__(self):
        self.scheme = NormScheme.parse(self.scheme)
        self.domain = parse_domain(self.domain)

    def fit(self, train: Dataset, class_stats_from: Dataset | None = None) -> "FeaturePipeline":
        """Fit on ``train``.

        ``class_stats_from`` supplies extra records whose only use is the
        per-class range of classes absent from ``train`` (class scheme only).
        """
        X = train.samples
        if self.domain is DomainTag.FREQ:
            self._fft = FFTMagnitude(self.n_fft).fit(X)
            if self.fft_first:
                X = self._fft.transform(X)
        self.normalizer = MinMaxNormalizer(self.scheme.value).fit(X, sources=train.sources)
        if self.scheme is NormScheme.CLASS and class_stats_from is not None:
            known = self.normalizer.stats_.per_class
            extra = class_stats_from.select(
                [c for c in class_stats_from.source_classes() if c not in known])
            if len(extra):
                Xe = extra.samples
                if self.domain is DomainTag.FREQ and self.fft_first:
                    Xe = self._fft.transform(Xe)
                known.update(fit_stats(Xe, NormScheme.CLASS, extra.sources).per_class)
        return self

    def transform(self, d: Dataset) -> np.ndarray:
        X = d.samples
        if self.domain is DomainTag.FREQ and self.fft_first:
            X = self._fft.transform(X)
        X = self.normalizer.transform(X, sources=d.sources)
        if self.domain is DomainTag.FREQ and not self.fft_first:
            X = self._fft.transform(X)
        return X

    def transform_dataset(self, d: Dataset) -> Dataset:
        return d.with_samples(self.transform(d), self.domain)

    def to_mapping(self) -> dict[str, str]:
        """Flat ``key = value`` form of the fitted pipeline (floats kept exact)."""
        stats = self.normalizer.stats_
        out = {
            "scheme": self.scheme.value,
            "domain": "time" if self.domain is DomainTag.TIME else "fft",
            "fft_first": str(self.fft_first).lower(),
            "input_length": str(self._fft.n_features_in_ if self._fft else
                                self.normalizer.n_features_in_),
        }
        if self._fft is not None:
            out["n_fft"] = str(self._fft.n_fft_)
        if stats.scheme is NormScheme.TRAINSET:
            out["global_min"] = repr(stats.global_min)
            out["global_max"] = repr(stats.global_max)
        for sc, (lo, hi) in stats.per_class.items():
            out[f"class.{sc.label}"] = f"{lo!r}, {hi!r}"
        return out

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "FeaturePipeline":
        try:
            scheme = NormScheme.parse(kv["scheme"])
            domain = parse_domain(kv["domain"])
            fft_first = kv.get("fft_first", "true") == "true"
            length = int(kv["input_length"])
            per_class = {}
            for key, value in kv.items():
                if key.startswith("class."):
                    lo, hi = (float(v) for v in value.split(","))
                    per_class[SourceClass.parse(key[len("class."):])] = (lo, hi)
            stats = NormStats(scheme, float(kv["global_min"]) if "global_min" in kv else None,
                              float(kv["global_max"]) if "global_max" in kv else None, per_class)
            n_fft = int(kv["n_fft"]) if "n_fft" in kv else None
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad feature pipeline description: {exc}") from None
        pipe = cls(scheme, domain, n_fft, fft_first)
        width = length
        if domain is DomainTag.FREQ:
            pipe._fft = FFTMagnitude(n_fft)
            pipe._fft.n_features_in_ = length
            pipe._fft.n_fft_ = n_fft
            if fft_first:
                width = n_fft // 2 + 1
        pipe.normalizer = MinMaxNormalizer(scheme.value)
        pipe.normalizer.stats_ = stats
        pipe.normalizer.n_features_in_ = width
        return pipe
