"""Measurement, label and dataset types plus their on-disk formats.

Binary dataset layout (all little-endian)::

    magic        4s   b"PDDS"
    version      u16  1 = raw dataset, 2 = feature file
    N            u64  number of records
    l_s          u32  samples per record
    sample_rate  f64
    domain_tag   u8   version 2 only: 0 = time domain, 1 = frequency domain
    N records of:
        id            u64
        defect        u8   0 = particle, 1 = protrusion
        polarity      u8   0 = negative, 1 = positive
        ui_numerator  u16
        ui_denominator u16
        samples       l_s x f32
"""
from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import (
    DataError,
    EmptyClass,
    InvalidSourceClass,
    LengthMismatch,
    MagicMismatch,
)

PAPER_LENGTH = 20002
PAPER_SAMPLE_RATE = 1e10
PAPER_N = 33000

MAGIC = b"PDDS"
VERSION_DATASET = 1
VERSION_FEATURES = 2
_HEADER = struct.Struct("<4sHQId")


class DefectType(enum.IntEnum):
    PARTICLE = 0
    PROTRUSION = 1


class Polarity(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1


class DomainTag(enum.IntEnum):
    TIME = 0
    FREQ = 1


class OutputClass(enum.IntEnum):
    """The four prediction targets. The integer value is the model's label index."""

    PA_NEG = 0
    PA_POS = 1
    PR_NEG = 2
    PR_POS = 3

    @classmethod
    def from_source(cls, sc: "SourceClass") -> "OutputClass":
        return cls(2 * int(sc.defect) + int(sc.polarity))

    @property
    def short(self) -> str:
        return _OUTPUT_NAMES[self]


_OUTPUT_NAMES = {
    OutputClass.PA_NEG: "Pa-",
    OutputClass.PA_POS: "Pa+",
    OutputClass.PR_NEG: "Pr-",
    OutputClass.PR_POS: "Pr+",
}


def as_ui(value) -> Fraction:
    """Coerce ``value`` (int, float, str such as ``"1.25"`` or ``"5/4"``) to a
    positive rational multiple of the inception voltage."""
    if isinstance(value, Fraction):
        ui = value
    elif isinstance(value, float):
        ui = Fraction(value).limit_denominator(1000)
    else:
        ui = Fraction(str(value).strip()).limit_denominator(1000)
    if ui <= 0:
        raise InvalidSourceClass(f"U_i multiple must be positive, got {value!r}")
    return ui


@dataclass(frozen=True, order=True)
class SourceClass:
    """Defect type, needle polarity and inception-voltage multiple of a record."""

    defect: DefectType
    polarity: Polarity
    ui: Fraction

    def __post_init__(self):
        object.__setattr__(self, "defect", DefectType(self.defect))
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "ui", as_ui(self.ui))
        if (self.defect, self.polarity, self.ui) not in _TABLE1_KEYS:
            raise InvalidSourceClass(f"{self.label} is not a measured source class")

    @property
    def output_class(self) -> OutputClass:
        return OutputClass.from_source(self)

    @property
    def label(self) -> str:
        sign = "-" if self.polarity == Polarity.NEGATIVE else "+"
        kind = "Pa" if self.defect == DefectType.PARTICLE else "Pr"
        return f"{kind}{sign}{_fmt_ui(self.ui)}"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, text: str) -> "SourceClass":
        """Parse labels such as ``Pa+1.5``, ``Pr-2`` or ``Pa+5/4``."""
        text = text.strip()
        try:
            kind, sign, ui = text[:2], text[2], text[3:]
            defect = {"pa": DefectType.PARTICLE, "pr": DefectType.PROTRUSION}[kind.lower()]
            polarity = {"-": Polarity.NEGATIVE, "+": Polarity.POSITIVE}[sign]
        except (IndexError, KeyError):
            raise InvalidSourceClass(f"cannot parse source class {text!r}") from None
        try:
            ui_value = as_ui(ui)
        except (ValueError, ZeroDivisionError):
            raise InvalidSourceClass(f"cannot parse source class {text!r}") from None
        return cls(defect, polarity, ui_value)


def _fmt_ui(ui: Fraction) -> str:
    if ui.denominator == 1:
        return str(ui.numerator)
    return f"{float(ui):g}"


_TABLE1_KEYS = {
    (DefectType.PARTICLE, Polarity.NEGATIVE, Fraction(1)),
    (DefectType.PARTICLE, Polarity.NEGATIVE, Fraction(3, 2)),
    (DefectType.PARTICLE, Polarity.NEGATIVE, Fraction(3)),
    (DefectType.PARTICLE, Polarity.POSITIVE, Fraction(1)),
    (DefectType.PARTICLE, Polarity.POSITIVE, Fraction(5, 4)),
    (DefectType.PARTICLE, Polarity.POSITIVE, Fraction(3, 2)),
    (DefectType.PROTRUSION, Polarity.NEGATIVE, Fraction(2)),
    (DefectType.PROTRUSION, Polarity.NEGATIVE, Fraction(3)),
    (DefectType.PROTRUSION, Polarity.POSITIVE, Fraction(2)),
}

#: Measured source classes and the number of records available for each.
TABLE1_COUNTS: dict[SourceClass, int] = {
    SourceClass(d, p, ui): (3500 if d == DefectType.PARTICLE else 4000)
    for d, p, ui in sorted(_TABLE1_KEYS)
}
TABLE1_CLASSES: tuple[SourceClass, ...] = tuple(TABLE1_COUNTS)


@dataclass(frozen=True)
class Measurement:
    samples: np.ndarray
    source: SourceClass
    id: int

    @property
    def output_class(self) -> OutputClass:
        return self.source.output_class

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Measurement):
            return NotImplemented
        return (
            self.id == other.id
            and self.source == other.source
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of equal-length records.

    Records are stored column-wise: ``samples`` is an ``(N, l_s)`` array,
    ``sources`` and ``ids`` hold the per-record metadata.
    """

    samples: np.ndarray
    sources: tuple[SourceClass, ...]
    ids: np.ndarray
    sample_rate: float = PAPER_SAMPLE_RATE
    domain_tag: DomainTag | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1 and samples.size == 0:
            samples = samples.reshape(0, 0)
        if samples.ndim != 2:
            raise DataError(f"samples must be 2-D, got shape {samples.shape}")
        samples = np.require(samples, dtype=np.float32, requirements="C")
        if samples is self.samples:
            samples = samples.copy()
        samples.setflags(write=False)
        ids = np.asarray(self.ids, dtype=np.int64).copy()
        ids.setflags(write=False)
        sources = tuple(self.sources)
        if not (len(sources) == len(ids) == samples.shape[0]):
            raise DataError("samples, sources and ids disagree in length")
        if len(np.unique(ids)) != len(ids):
            raise DataError("measurement ids must be unique")
        if not np.all(np.isfinite(samples)):
            raise DataError("samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))
        if self.domain_tag is not None:
            object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @classmethod
    def from_measurements(
        cls,
        measurements: Iterable[Measurement],
        sample_rate: float = PAPER_SAMPLE_RATE,
        length: int | None = None,
    ) -> "Dataset":
        measurements = list(measurements)
        if measurements:
            lengths = {len(m) for m in measurements}
            if len(lengths) != 1:
                raise LengthMismatch("measurements differ in length")
            samples = np.stack([np.asarray(m.samples, dtype=np.float32) for m in measurements])
        else:
            samples = np.zeros((0, length or 0), dtype=np.float32)
        return cls(
            samples,
            tuple(m.source for m in measurements),
            np.array([m.id for m in measurements], dtype=np.int64),
            sample_rate,
        )

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __iter__(self) -> Iterator[Measurement]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Measurement:
        return Measurement(self.samples[i], self.sources[i], int(self.ids[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.domain_tag == other.domain_tag
            and self.sources == other.sources
            and np.array_equal(self.ids, other.ids)
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None

    @property
    def measurements(self) -> list[Measurement]:
        return list(self)

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.samples

    @property
    def y(self) -> np.ndarray:
        """Output-class label index of every record."""
        return np.array([int(s.output_class) for s in self.sources], dtype=np.int64)

    def class_counts(self) -> dict[SourceClass, int]:
        counts: dict[SourceClass, int] = {}
        for sc in self.sources:
            counts[sc] = counts.get(sc, 0) + 1
        return dict(sorted(counts.items()))

    def source_classes(self) -> list[SourceClass]:
        return sorted(set(self.sources))

    def take(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.samples[indices],
            tuple(self.sources[i] for i in indices),
            self.ids[indices],
            self.sample_rate,
            self.domain_tag,
        )

    def select(self, classes: Iterable[SourceClass]) -> "Dataset":
        """Sub-dataset of the records whose source class is in ``classes``."""
        wanted = set(classes)
        return self.take([i for i, s in enumerate(self.sources) if s in wanted])

    def with_samples(self, samples: np.ndarray, domain_tag: DomainTag | None = None) -> "Dataset":
        return Dataset(samples, self.sources, self.ids, self.sample_rate, domain_tag)

    def concat(self, other: "Dataset") -> "Dataset":
        return concat([self, other])


def concat(parts: Sequence[Dataset]) -> Dataset:
    parts = [p for p in parts if len(p)] or list(parts[:1])
    if not parts:
        raise DataError("nothing to concatenate")
    if len({p.length for p in parts}) > 1:
        raise LengthMismatch("datasets differ in record length")
    return Dataset(
        np.concatenate([p.samples for p in parts]),
        tuple(s for p in parts for s in p.sources),
        np.concatenate([p.ids for p in parts]),
        parts[0].sample_rate,
        parts[0].domain_tag,
    )


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: Dataset

    def __post_init__(self):
        check_disjoint(self.train, self.test)


def check_disjoint(train: Dataset, other: Dataset, what: str = "test") -> None:
    from .exceptions import LeakageDetected

    overlap = np.intersect1d(train.ids, other.ids)
    if overlap.size:
        raise LeakageDetected(
            f"{overlap.size} {what} id(s) also in the training set, e.g. {int(overlap[0])}"
        )


def train_count(n: int, fraction: float) -> int:
    """Records of a class of size ``n`` that go to the training set (half-up rounding)."""
    return int(math.floor(fraction * n + 0.5))


def stratified_split(d: Dataset, fraction: float = 0.8, seed: int = 0) -> Split:
    """Randomly partition every source class into train/test parts.

    Each class contributes ``round(fraction * n)`` records to the training set.
    The partition depends only on ``(d, fraction, seed)``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[SourceClass, list[int]] = {}
    for i, sc in enumerate(d.sources):
        by_class.setdefault(sc, []).append(i)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for sc in sorted(by_class):
        members = np.array(by_class[sc])
        if len(members) < 2:
            raise EmptyClass(f"source class {sc} has {len(members)} measurement(s), need >= 2")
        perm = rng.permutation(members)
        k = train_count(len(members), fraction)
        train_idx.extend(np.sort(perm[:k]))
        test_idx.extend(np.sort(perm[k:]))
    return Split(d.take(sorted(train_idx)), d.take(sorted(test_idx)))


def _record_dtype(length: int) -> np.dtype:
    return np.dtype(
        [
            ("id", "<u8"),
            ("defect", "u1"),
            ("polarity", "u1"),
            ("ui_num", "<u2"),
            ("ui_den", "<u2"),
            ("samples", "<f4", (length,)),
        ]
    )


def to_bytes(d: Dataset) -> bytes:
    version = VERSION_DATASET if d.domain_tag is None else VERSION_FEATURES
    header = _HEADER.pack(MAGIC, version, len(d), d.length, d.sample_rate)
    if version == VERSION_FEATURES:
        header += struct.pack("<B", int(d.domain_tag))
    records = np.zeros(len(d), dtype=_record_dtype(d.length))
    records["id"] = d.ids
    records["defect"] = [int(s.defect) for s in d.sources]
    records["polarity"] = [int(s.polarity) for s in d.sources]
    records["ui_num"] = [s.ui.numerator for s in d.sources]
    records["ui_den"] = [s.ui.denominator for s in d.sources]
    records["samples"] = d.samples
    return header + records.tobytes()


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise LengthMismatch("file shorter than the header")
    magic, version, n, length, sample_rate = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {MAGIC!r}")
    offset = _HEADER.size
    domain_tag = None
    if version == VERSION_FEATURES:
        (tag,) = struct.unpack_from("<B", buf, offset)
        domain_tag = DomainTag(tag)
        offset += 1
    elif version != VERSION_DATASET:
        raise DataError(f"unsupported format version {version}")
    dtype = _record_dtype(length)
    if len(buf) - offset != n * dtype.itemsize:
        raise LengthMismatch(
            f"header promises {n} records of {length} samples but payload is "
            f"{len(buf) - offset} bytes"
        )
    records = np.frombuffer(buf, dtype=dtype, count=n, offset=offset)
    sources = tuple(
        SourceClass(DefectType(int(r["defect"])), Polarity(int(r["polarity"])),
                    Fraction(int(r["ui_num"]), int(r["ui_den"])))
        for r in records[["defect", "polarity", "ui_num", "ui_den"]]
    )
    samples = np.array(records["samples"], dtype=np.float32).reshape(n, length)
    return Dataset(samples, sources, records["id"].astype(np.int64), sample_rate, domain_tag)


def save(d: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(d))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def export_csv(d: Dataset, path) -> None:
    """Write one row per record: id, defect, polarity, ui, then the samples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "defect", "polarity", "ui"] + [f"s{i}" for i in range(d.length)])
        for m in d:
            writer.writerow(
                [m.id, m.source.defect.name.lower(), m.source.polarity.name.lower(), str(m.source.ui)]
                + [repr(float(v)) for v in m.samples]
            )
