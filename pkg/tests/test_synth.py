import math
from dataclasses import replace

import numpy as np
import pytest

from uhfpd.dataset import TABLE1_CLASSES, SourceClass
from uhfpd.exceptions import ConfigError, InvalidParams, InvalidSourceClass
from uhfpd.synth import (
    ClassSignalParams,
    SynthConfig,
    config_from_text,
    damped_pulse_train,
    default_params,
    desk_config,
    paper_config,
    record_rng,
    synth_dataset,
    synth_measurement,
)

PA_POS_1 = SourceClass.parse("Pa+1")
QUIET = ClassSignalParams(pulse_count_range=(0, 0), noise_sigma=0.0)


def test_no_pulses_no_noise_gives_zero_signal():
    m = synth_measurement(PA_POS_1, QUIET, np.random.default_rng(0), length=256)
    assert m.samples.dtype == np.float32
    assert np.all(m.samples == 0)


def test_undamped_pulse_is_a_cosine_from_its_onset():
    rate = 1e10
    t = np.arange(400) / rate
    t0 = t[100]
    x = damped_pulse_train(t, [t0], [1.0], [math.inf], [1e9], [math.pi / 2])
    assert np.all(x[:100] == 0)
    assert x[100] == pytest.approx(1.0, abs=1e-12)
    assert x.max() == pytest.approx(1.0, abs=1e-12)
    expected = np.cos(2 * np.pi * 1e9 * (t[100:] - t0))
    assert np.allclose(x[100:], expected, atol=1e-12)


def test_damped_pulse_envelope():
    t = np.arange(100) / 1e10
    tau = 2e-9
    # phase pi/2 at a carrier that samples every crest: envelope is visible directly
    x = damped_pulse_train(t, [0.0], [2.0], [tau], [1e9], [math.pi / 2])
    crests = x[::10]
    assert np.allclose(crests, 2.0 * np.exp(-t[::10] / tau), atol=1e-12)


def test_same_stream_same_signal():
    p = default_params(PA_POS_1)
    a = synth_measurement(PA_POS_1, p, record_rng(5, 17), 1000)
    b = synth_measurement(PA_POS_1, p, record_rng(5, 17), 1000)
    c = synth_measurement(PA_POS_1, p, record_rng(5, 18), 1000)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_signal_is_finite_for_every_class():
    for sc in TABLE1_CLASSES:
        m = synth_measurement(sc, default_params(sc), record_rng(0, 0), 1000,
                              path_loss_jitter=4.0)
        assert np.all(np.isfinite(m.samples))
        assert np.abs(m.samples).max() > 0


def test_measured_layout_counts():
    cfg = replace(paper_config(), length=8)
    assert cfg.n_total == 33000
    d = synth_dataset(cfg)
    assert len(d) == 33000
    assert d.class_counts() == dict(cfg.counts)
    assert np.array_equal(d.ids, np.arange(33000))


def test_one_record_per_class():
    cfg = desk_config(per_class=1, length=1000)
    d = synth_dataset(cfg)
    assert len(d) == 9
    assert set(d.sources) == set(TABLE1_CLASSES)


def test_dataset_is_deterministic():
    cfg = desk_config(per_class=3, length=1000, master_seed=11, path_loss_jitter=1.0)
    assert synth_dataset(cfg) == synth_dataset(cfg)
    assert synth_dataset(cfg) != synth_dataset(replace(cfg, master_seed=12))


def test_parallel_matches_serial():
    cfg = desk_config(per_class=4, length=1000, master_seed=2)
    assert synth_dataset(cfg, n_jobs=2) == synth_dataset(cfg, n_jobs=1)


def test_amplitude_grows_with_ui_multiple():
    p = replace(default_params(SourceClass.parse("Pa-1")), amplitude_jitter=0.0,
                ui_amplitude_slope=0.5, noise_sigma=0.0)
    classes = [SourceClass.parse("Pa-1"), SourceClass.parse("Pa-3")]
    cfg = SynthConfig({c: 120 for c in classes}, {c: p for c in classes}, length=1000)
    d = synth_dataset(cfg)
    mean_abs = {c: np.abs(d.select([c]).samples).max(axis=1).mean() for c in classes}
    assert mean_abs[classes[1]] > mean_abs[classes[0]]


def test_path_loss_scales_bursts_not_noise():
    p = replace(default_params(PA_POS_1), noise_sigma=0.0)
    plain = synth_measurement(PA_POS_1, p, record_rng(0, 3), 1000, path_loss_jitter=0.0)
    lossy = synth_measurement(PA_POS_1, p, record_rng(0, 3), 1000, path_loss_jitter=3.0)
    ratio = np.abs(lossy.samples).max() / np.abs(plain.samples).max()
    assert math.exp(-3.0) - 1e-6 <= ratio <= 1.0 + 1e-6
    # the attenuation is a single factor for the whole record
    nz = np.abs(plain.samples) > 1e-3
    assert np.allclose(lossy.samples[nz] / plain.samples[nz], ratio, rtol=1e-4)


@pytest.mark.parametrize("change", [
    dict(carrier_freq_range=(1e9, 0.5e9)),
    dict(carrier_freq_range=(1e9, 6e9)),
    dict(damping_tau_range=(0.0, 1e-9)),
    dict(base_amplitude=0.0),
    dict(noise_sigma=-1.0),
    dict(pulse_count_range=(3, 1)),
    dict(onset_range=(0.5, 0.9), pulse_window=0.6),
])
def test_invalid_params(change):
    with pytest.raises(InvalidParams):
        replace(QUIET, **change).validate(1e10)


def test_carrier_drift_can_cross_nyquist():
    p = replace(QUIET, carrier_freq_range=(4e9, 4.5e9), ui_freq_slope=0.5e9)
    p.validate(1e10, 1)
    with pytest.raises(InvalidParams):
        p.validate(1e10, 3)


def test_config_counts_must_be_positive():
    with pytest.raises(InvalidParams):
        synth_dataset(desk_config(per_class=0))


def test_config_file_parsing():
    cfg = config_from_text("""
        # two classes, custom noise
        length = 1200
        master_seed = 4
        path_loss_jitter = 1.5
        count.Pa-1 = 3
        count.Pr+2 = 5
        param.*.noise_sigma = 0.1
        param.Pr+.noise_sigma = 0.2
        param.Pa-1.carrier_freq_range = 1e9, 1.1e9
    """)
    pa, pr = SourceClass.parse("Pa-1"), SourceClass.parse("Pr+2")
    assert cfg.counts == {pa: 3, pr: 5}
    assert (cfg.length, cfg.master_seed, cfg.path_loss_jitter) == (1200, 4, 1.5)
    assert cfg.params[pa].noise_sigma == 0.1
    assert cfg.params[pr].noise_sigma == 0.2
    assert cfg.params[pa].carrier_freq_range == (1e9, 1.1e9)


def test_config_table1_shorthand():
    cfg = config_from_text("count.table1 = 1\nlength = 8\n")
    assert cfg.n_total == 33000
    cfg = config_from_text("count.* = 2\n")
    assert cfg.n_total == 18


@pytest.mark.parametrize("text, exc", [
    ("length = 10\n", ConfigError),
    ("count.Pa-1 = x\n", ConfigError),
    ("count.Pa+2 = 1\n", InvalidSourceClass),
    ("count.Pa-1 = 1\nwhat = 3\n", ConfigError),
    ("count.Pa-1 = 1\nparam.*.nope = 3\n", ConfigError),
    ("count.Pa-1 = 1\nparam.*.phase_range = 1\n", ConfigError),
    ("count.Pa-1 = 1\ncount.Pa-1 = 2\n", ConfigError),
])
def test_config_errors(text, exc):
    with pytest.raises(exc):
        config_from_text(text)
