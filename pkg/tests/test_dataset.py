import struct
from fractions import Fraction

import numpy as np
import pytest

from uhfpd.dataset import (
    MAGIC,
    TABLE1_CLASSES,
    TABLE1_COUNTS,
    Dataset,
    DefectType,
    DomainTag,
    Measurement,
    OutputClass,
    Polarity,
    SourceClass,
    Split,
    check_disjoint,
    concat,
    export_csv,
    from_bytes,
    load,
    save,
    stratified_split,
    to_bytes,
    train_count,
)
from uhfpd.exceptions import (
    DataError,
    EmptyClass,
    InvalidSourceClass,
    LeakageDetected,
    LengthMismatch,
    MagicMismatch,
)

PA_NEG_1 = SourceClass.parse("Pa-1")
PR_POS_2 = SourceClass.parse("Pr+2")


def _dataset(per_class, length=5, classes=(PA_NEG_1, PR_POS_2), seed=0):
    rng = np.random.default_rng(seed)
    ms = []
    for sc, n in zip(classes, per_class if isinstance(per_class, (list, tuple)) else
                     [per_class] * len(classes)):
        for _ in range(n):
            ms.append(Measurement(rng.standard_normal(length).astype(np.float32), sc, len(ms)))
    return Dataset.from_measurements(ms, 1e10, length)


# -- labels ------------------------------------------------------------------

def test_from_source_examples():
    assert OutputClass.from_source(SourceClass(DefectType.PARTICLE, Polarity.NEGATIVE, 1.5)) \
        is OutputClass.PA_NEG
    assert OutputClass.from_source(SourceClass(DefectType.PROTRUSION, Polarity.POSITIVE, 2)) \
        is OutputClass.PR_POS


def test_ui_is_discarded_by_output_class():
    a = SourceClass.parse("Pa+1")
    b = SourceClass.parse("Pa+1.25")
    assert a != b
    assert a.output_class == b.output_class == OutputClass.PA_POS


def test_output_classes_are_covered_by_measured_classes():
    assert len(OutputClass) == 4
    assert {sc.output_class for sc in TABLE1_CLASSES} == set(OutputClass)


def test_source_class_equality_uses_all_fields():
    assert SourceClass.parse("Pa+5/4") == SourceClass(DefectType.PARTICLE, Polarity.POSITIVE,
                                                      Fraction(5, 4))
    assert SourceClass.parse("Pa+1.5") != SourceClass.parse("Pa-1.5")
    assert SourceClass.parse("Pr-3") != SourceClass.parse("Pa-3")


@pytest.mark.parametrize("text", ["Pa+2", "Pr+3", "Pr-1", "Xx+1", "Pa*1", "Pa+", "Pa+0"])
def test_unmeasured_or_malformed_source_class_rejected(text):
    with pytest.raises(InvalidSourceClass):
        SourceClass.parse(text)


def test_measured_layout():
    assert len(TABLE1_CLASSES) == 9
    assert sum(1 for c in TABLE1_CLASSES if c.defect == DefectType.PARTICLE) == 6
    assert sum(TABLE1_COUNTS.values()) == 33000
    for sc in TABLE1_CLASSES:
        assert SourceClass.parse(sc.label) == sc


# -- split -------------------------------------------------------------------

@pytest.mark.parametrize("n, train, test", [(3500, 2800, 700), (4000, 3200, 800)])
def test_split_counts_for_measured_class_sizes(n, train, test):
    assert train_count(n, 0.8) == train
    d = Dataset(np.zeros((n, 1), np.float32), (PA_NEG_1,) * n, np.arange(n))
    split = stratified_split(d, 0.8, seed=3)
    assert (len(split.train), len(split.test)) == (train, test)


def test_split_rounds_half_up():
    # 0.8 * 5 = 4, 0.5 * 5 = 2.5 -> 3, 0.5 * 3 = 1.5 -> 2
    assert train_count(5, 0.8) == 4
    assert train_count(5, 0.5) == 3
    assert train_count(3, 0.5) == 2


def test_split_is_a_stratified_partition():
    d = _dataset([13, 7])
    split = stratified_split(d, 0.8, seed=1)
    ids = np.concatenate([split.train.ids, split.test.ids])
    assert sorted(ids) == sorted(d.ids)
    assert split.train.class_counts() == {PA_NEG_1: 10, PR_POS_2: 6}
    assert split.test.class_counts() == {PA_NEG_1: 3, PR_POS_2: 1}
    # records keep their samples
    for m in split.test:
        assert m == d[int(np.flatnonzero(d.ids == m.id)[0])]


def test_split_is_deterministic_in_seed():
    d = _dataset(20)
    a = stratified_split(d, 0.8, seed=7)
    b = stratified_split(d, 0.8, seed=7)
    c = stratified_split(d, 0.8, seed=8)
    assert np.array_equal(a.train.ids, b.train.ids)
    assert not np.array_equal(a.train.ids, c.train.ids)


def test_split_rejects_tiny_class():
    d = _dataset([5, 1])
    with pytest.raises(EmptyClass):
        stratified_split(d, 0.8, 0)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_bounds(fraction):
    with pytest.raises(ValueError):
        stratified_split(_dataset(4), fraction, 0)


def test_overlapping_split_is_leakage():
    d = _dataset(4)
    with pytest.raises(LeakageDetected):
        Split(d, d.take([0]))
    with pytest.raises(LeakageDetected):
        check_disjoint(d.take([1, 2]), d.take([2, 3]), "holdout")


# -- container ---------------------------------------------------------------

def test_dataset_invariants():
    d = _dataset(3)
    assert not d.samples.flags.writeable
    with pytest.raises(DataError):
        Dataset(d.samples, d.sources, np.zeros(len(d)))  # duplicate ids
    with pytest.raises(DataError):
        Dataset(d.samples[:2], d.sources, d.ids)
    bad = d.samples.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        Dataset(bad, d.sources, d.ids)
    with pytest.raises(LengthMismatch):
        Dataset.from_measurements([Measurement(np.zeros(3), PA_NEG_1, 0),
                                   Measurement(np.zeros(4), PA_NEG_1, 1)])


def test_class_counts_sum_to_n():
    d = _dataset([4, 9])
    assert sum(d.class_counts().values()) == len(d) == 13
    assert list(d.y[:4]) == [int(OutputClass.PA_NEG)] * 4


def test_concat_and_select():
    d = _dataset([3, 2])
    parts = [d.select([PA_NEG_1]), d.select([PR_POS_2])]
    assert concat(parts) == d
    with pytest.raises(DataError):
        concat([d, d])  # duplicate ids


# -- binary format -----------------------------------------------------------

def test_round_trip(tmp_path):
    d = _dataset([1, 1], length=7)
    save(d, tmp_path / "d.pdds")
    back = load(tmp_path / "d.pdds")
    assert back == d
    assert back.sample_rate == 1e10
    assert back.domain_tag is None


def test_round_trip_all_source_classes():
    ms = [Measurement(np.full(3, i, np.float32), sc, 100 + i) for i, sc in enumerate(TABLE1_CLASSES)]
    d = Dataset.from_measurements(ms)
    assert from_bytes(to_bytes(d)) == d


def test_header_layout():
    d = _dataset([2, 0], length=4)
    buf = to_bytes(d)
    magic, version, n, length, rate = struct.unpack_from("<4sHQId", buf, 0)
    assert (magic, version, n, length, rate) == (MAGIC, 1, 2, 4, 1e10)
    record = 8 + 1 + 1 + 2 + 2 + 4 * 4
    assert len(buf) == struct.calcsize("<4sHQId") + 2 * record
    # first record: id 0, particle, negative, ui 1/1, then float32 samples
    off = struct.calcsize("<4sHQId")
    assert struct.unpack_from("<QBBHH", buf, off) == (0, 0, 0, 1, 1)
    assert np.array_equal(np.frombuffer(buf, "<f4", 4, off + 14), d.samples[0])


def test_features_file_carries_domain_tag():
    d = _dataset(2).with_samples(_dataset(2).samples, DomainTag.FREQ)
    buf = to_bytes(d)
    assert struct.unpack_from("<H", buf, 4)[0] == 2
    back = from_bytes(buf)
    assert back.domain_tag is DomainTag.FREQ
    assert back == d


def test_empty_dataset_round_trip():
    d = Dataset.from_measurements([], length=16)
    buf = to_bytes(d)
    assert struct.unpack_from("<Q", buf, 6)[0] == 0
    back = from_bytes(buf)
    assert len(back) == 0 and back.length == 16


def test_wrong_magic():
    buf = bytearray(to_bytes(_dataset(1)))
    buf[:4] = b"XXXX"
    with pytest.raises(MagicMismatch):
        from_bytes(bytes(buf))


def test_truncated_or_padded_payload():
    buf = to_bytes(_dataset(2))
    with pytest.raises(LengthMismatch):
        from_bytes(buf[:-1])
    with pytest.raises(LengthMismatch):
        from_bytes(buf + b"\0")
    with pytest.raises(LengthMismatch):
        from_bytes(buf[:10])


def test_unknown_version():
    buf = bytearray(to_bytes(_dataset(1)))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(DataError):
        from_bytes(bytes(buf))


def test_export_csv(tmp_path):
    d = _dataset([1, 1], length=3)
    export_csv(d, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "id,defect,polarity,ui,s0,s1,s2"
    assert lines[2].startswith("1,protrusion,positive,2,")
