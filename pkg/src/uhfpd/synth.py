"""Synthetic UHF partial-discharge records.

Each record is a train of damped sinusoidal bursts plus white sensor noise::

    s(t) = L * sum_k A_k exp(-(t - t_k)/tau_k) sin(2 pi f_k (t - t_k) + phi_k) [t >= t_k]
           + N(0, noise_sigma^2)

where ``L`` is a per-record path-loss factor. The statistics are invented
stand-ins for laboratory data: they give the four output classes separable
spectra and make amplitude and carrier frequency depend on the inception
voltage multiple. They are not physically validated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from .config import parse_kv_file, parse_kv_text
from .dataset import (
    PAPER_LENGTH,
    PAPER_SAMPLE_RATE,
    TABLE1_COUNTS,
    Dataset,
    DefectType,
    Measurement,
    Polarity,
    SourceClass,
)
from .exceptions import ConfigError, InvalidParams


@dataclass(frozen=True)
class ClassSignalParams:
    """Per-source-class generator statistics.

    Ranges are closed ``(low, high)`` intervals sampled uniformly. Pulse
    onsets are fractions of the record: the first pulse starts within
    ``onset_range``, later ones within ``[first onset, pulse_window]``.
    ``ui_freq_slope`` shifts every carrier by that many Hz per unit of
    inception-voltage multiple above 1.
    """

    carrier_freq_range: tuple[float, float] = (0.8e9, 1.2e9)
    damping_tau_range: tuple[float, float] = (2e-9, 6e-9)
    pulse_count_range: tuple[int, int] = (1, 3)
    base_amplitude: float = 1.0
    amplitude_jitter: float = 0.0
    ui_amplitude_slope: float = 0.0
    noise_sigma: float = 0.0
    phase_range: tuple[float, float] = (0.0, 2 * math.pi)
    ui_freq_slope: float = 0.0
    onset_range: tuple[float, float] = (0.1, 0.2)
    pulse_window: float = 0.6

    def validate(self, sample_rate: float, ui: Fraction = Fraction(1)) -> None:
        for name in ("carrier_freq_range", "damping_tau_range", "pulse_count_range",
                     "phase_range", "onset_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidParams(f"{name} is empty: ({lo}, {hi})")
        nyquist = sample_rate / 2
        f_lo, f_hi = self.carrier_range_at(ui)
        if f_lo <= 0 or f_hi >= nyquist:
            raise InvalidParams(
                f"carrier band ({f_lo:.4g}, {f_hi:.4g}) Hz must lie in (0, {nyquist:.4g})"
            )
        if self.damping_tau_range[0] <= 0:
            raise InvalidParams("damping time constants must be positive")
        if self.pulse_count_range[0] < 0:
            raise InvalidParams("pulse counts must be non-negative")
        if self.base_amplitude <= 0:
            raise InvalidParams("base_amplitude must be positive")
        if self.amplitude_jitter < 0 or self.noise_sigma < 0:
            raise InvalidParams("jitter and noise levels must be non-negative")
        if not (0 <= self.onset_range[0] and self.onset_range[1] <= self.pulse_window <= 1):
            raise InvalidParams("onsets must satisfy 0 <= onset_range <= pulse_window <= 1")

    def carrier_range_at(self, ui) -> tuple[float, float]:
        shift = self.ui_freq_slope * (float(ui) - 1.0)
        return self.carrier_freq_range[0] + shift, self.carrier_freq_range[1] + shift

    def amplitude_gain(self, ui) -> float:
        return 1.0 + self.ui_amplitude_slope * (float(ui) - 1.0)


def damped_pulse_train(t: np.ndarray, onsets, amplitudes, taus, freqs, phases) -> np.ndarray:
    """Sum of one-sided exponentially damped sinusoids evaluated at times ``t``.

    ``taus`` may contain ``inf`` for undamped bursts.
    """
    out = np.zeros_like(t, dtype=np.float64)
    for t0, a, tau, f, phi in zip(onsets, amplitudes, taus, freqs, phases):
        start = int(np.searchsorted(t, t0, side="left"))
        dt = t[start:] - t0
        env = np.exp(-dt / tau) if np.isfinite(tau) else 1.0
        out[start:] += a * env * np.sin(2 * np.pi * f * dt + phi)
    return out


def synth_measurement(
    sc: SourceClass,
    p: ClassSignalParams,
    rng: np.random.Generator,
    length: int = PAPER_LENGTH,
    sample_rate: float = PAPER_SAMPLE_RATE,
    path_loss_jitter: float = 0.0,
    id: int = 0,
) -> Measurement:
    """Draw one record of source class ``sc`` from the stream ``rng``.

    The path-loss factor is ``exp(-path_loss_jitter * u)`` with ``u ~ U(0, 1)``
    and scales the bursts but not the sensor noise.
    """
    p.validate(sample_rate, sc.ui)
    if path_loss_jitter < 0:
        raise InvalidParams("path_loss_jitter must be non-negative")
    t = np.arange(length) / sample_rate
    duration = length / sample_rate
    n_pulses = int(rng.integers(p.pulse_count_range[0], p.pulse_count_range[1] + 1))
    first = rng.uniform(*p.onset_range) * duration
    onsets = np.concatenate(
        ([first], rng.uniform(first, max(first, p.pulse_window * duration), max(n_pulses - 1, 0)))
    )[:n_pulses]
    gain = p.amplitude_gain(sc.ui)
    jitter = rng.uniform(1 - p.amplitude_jitter, 1 + p.amplitude_jitter, n_pulses)
    amplitudes = p.base_amplitude * gain * np.clip(jitter, 0.0, None)
    taus = rng.uniform(*p.damping_tau_range, n_pulses)
    freqs = rng.uniform(*p.carrier_range_at(sc.ui), n_pulses)
    phases = rng.uniform(*p.phase_range, n_pulses)
    path_loss = math.exp(-path_loss_jitter * rng.uniform())
    signal = path_loss * damped_pulse_train(t, onsets, amplitudes, taus, freqs, phases)
    if p.noise_sigma > 0:
        signal = signal + rng.normal(0.0, p.noise_sigma, length)
    return Measurement(signal.astype(np.float32), sc, id)


# Class layout. Needle polarity sets the sign of each burst's first
# half-cycle and its damping (negative: short-lived, positive: ringing).
# Protrusions fire more bursts per record than particles. Carriers drift
# upward by 0.8 GHz per unit of U_i multiple and amplitudes grow with U_i.
# Protrusion carriers sit 0.6 GHz below particle ones, so at the measured
# multiples a Pr record at 2 U_i shares its band with a Pa record at 1.25 U_i,
# and a defect seen at a single multiple confounds drift with defect type.
_BASE = ClassSignalParams(
    amplitude_jitter=0.1,
    ui_amplitude_slope=0.25,
    noise_sigma=0.001,
    ui_freq_slope=0.8e9,
)
_NEG = dict(phase_range=(math.pi - 0.5, math.pi + 0.5), damping_tau_range=(1e-9, 2e-9))
_POS = dict(phase_range=(-0.5, 0.5), damping_tau_range=(5e-9, 10e-9))
_PA = dict(carrier_freq_range=(0.9e9, 1.1e9), pulse_count_range=(1, 2))
_PR = dict(carrier_freq_range=(0.3e9, 0.5e9), pulse_count_range=(2, 4))
DEFAULT_PARAMS: dict[tuple[DefectType, Polarity], ClassSignalParams] = {
    (DefectType.PARTICLE, Polarity.NEGATIVE): replace(_BASE, **_PA, **_NEG),
    (DefectType.PARTICLE, Polarity.POSITIVE): replace(_BASE, **_PA, **_POS),
    (DefectType.PROTRUSION, Polarity.NEGATIVE): replace(_BASE, **_PR, **_NEG),
    (DefectType.PROTRUSION, Polarity.POSITIVE): replace(_BASE, **_PR, **_POS),
}


def default_params(sc: SourceClass) -> ClassSignalParams:
    return DEFAULT_PARAMS[(sc.defect, sc.polarity)]


@dataclass(frozen=True)
class SynthConfig:
    counts: Mapping[SourceClass, int]
    params: Mapping[SourceClass, ClassSignalParams] = field(default_factory=dict)
    length: int = PAPER_LENGTH
    sample_rate: float = PAPER_SAMPLE_RATE
    master_seed: int = 0
    path_loss_jitter: float = 0.0

    def __post_init__(self):
        counts = dict(sorted(self.counts.items()))
        params = {sc: self.params.get(sc, default_params(sc)) for sc in counts}
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "params", params)

    def validate(self) -> None:
        if not self.counts:
            raise InvalidParams("no source classes configured")
        for sc, n in self.counts.items():
            if n <= 0:
                raise InvalidParams(f"count for {sc} must be positive, got {n}")
            self.params[sc].validate(self.sample_rate, sc.ui)
        if self.length < 1:
            raise InvalidParams("length must be positive")
        if self.path_loss_jitter < 0:
            raise InvalidParams("path_loss_jitter must be non-negative")

    @property
    def n_total(self) -> int:
        return sum(self.counts.values())

    def jobs(self) -> list[tuple[int, SourceClass]]:
        """(measurement index, source class) for every record, in dataset order."""
        out = []
        for sc, n in self.counts.items():
            offset = len(out)
            out.extend((offset + i, sc) for i in range(n))
        return out


def record_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for record ``index``, derived from the seed and index alone."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _make_one(cfg: SynthConfig, index: int, sc: SourceClass) -> Measurement:
    return synth_measurement(sc, cfg.params[sc], record_rng(cfg.master_seed, index),
                             cfg.length, cfg.sample_rate, cfg.path_loss_jitter, id=index)


def synth_dataset(cfg: SynthConfig, n_jobs: int = 1,
                  progress: Callable[[int, int], None] | None = None) -> Dataset:
    """Generate ``cfg.counts[sc]`` records per class; ids are consecutive from 0.

    The result does not depend on ``n_jobs``: every record has its own stream.
    """
    cfg.validate()
    jobs = cfg.jobs()
    if n_jobs != 1 and len(jobs) > 1:
        from joblib import Parallel, delayed

        records = Parallel(n_jobs=n_jobs)(delayed(_make_one)(cfg, i, sc) for i, sc in jobs)
    else:
        records = []
        for i, sc in jobs:
            records.append(_make_one(cfg, i, sc))
            if progress is not None:
                progress(i + 1, len(jobs))
    return Dataset.from_measurements(records, cfg.sample_rate, cfg.length)


def paper_config(master_seed: int = 0, path_loss_jitter: float = 0.0) -> SynthConfig:
    """Full-size layout: the measured class counts and 20002-sample records."""
    return SynthConfig(dict(TABLE1_COUNTS), master_seed=master_seed,
                       path_loss_jitter=path_loss_jitter)


def desk_config(per_class: int = 400, length: int = 2000, classes=None,
                master_seed: int = 0, path_loss_jitter: float = 0.0) -> SynthConfig:
    classes = list(TABLE1_COUNTS) if classes is None else list(classes)
    return SynthConfig({sc: per_class for sc in classes}, length=length,
                       master_seed=master_seed, path_loss_jitter=path_loss_jitter)


# -- key-value config files --------------------------------------------------
#
#   length = 2000
#   sample_rate = 1e10
#   master_seed = 1
#   path_loss_jitter = 1.5
#   count.Pa-1 = 400            # one line per source class to generate
#   count.* = 400               # shorthand: every measured source class
#   param.Pa+.noise_sigma = 0.1 # override per output class (Pa-, Pa+, Pr-, Pr+)
#   param.Pa+1.5.ui_freq_slope = 2e8   # or per source class
#   param.*.noise_sigma = 0.1   # or for all classes
#
# Range-valued parameters take two comma-separated numbers.

_RANGE_FIELDS = {"carrier_freq_range", "damping_tau_range", "pulse_count_range",
                 "phase_range", "onset_range"}
_PARAM_FIELDS = {f.name for f in fields(ClassSignalParams)}


def _parse_param(name: str, text: str):
    if name not in _PARAM_FIELDS:
        raise ConfigError(f"unknown signal parameter {name!r}")
    if name in _RANGE_FIELDS:
        parts = [v.strip() for v in text.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{name} needs two comma-separated values")
        cast = int if name == "pulse_count_range" else float
        try:
            return cast(float(parts[0])), cast(float(parts[1]))
        except ValueError:
            raise ConfigError(f"bad numbers in {name} = {text!r}") from None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"bad number in {name} = {text!r}") from None


def config_from_mapping(kv: Mapping[str, str]) -> SynthConfig:
    counts: dict[SourceClass, int] = {}
    overrides: list[tuple[int, str, str, str]] = []
    scalars = {"length": PAPER_LENGTH, "sample_rate": PAPER_SAMPLE_RATE,
               "master_seed": 0, "path_loss_jitter": 0.0}
    for key, value in kv.items():
        if key.startswith("count."):
            target = key[len("count."):]
            try:
                n = int(value)
            except ValueError:
                raise ConfigError(f"bad count {key} = {value!r}") from None
            if target == "*":
                for sc in TABLE1_COUNTS:
                    counts[sc] = n
            elif target.lower() == "table1":
                counts.update(TABLE1_COUNTS)
            else:
                counts[SourceClass.parse(target)] = n
        elif key.startswith("param."):
            target, _, name = key[len("param."):].rpartition(".")
            if not target:
                raise ConfigError(f"bad parameter key {key!r}")
            # precedence: all classes < output class < source class
            rank = 0 if target == "*" else (1 if len(target) == 3 else 2)
            overrides.append((rank, target, name, value))
        elif key in scalars:
            try:
                scalars[key] = type(scalars[key])(float(value)) if key != "master_seed" else int(value)
            except ValueError:
                raise ConfigError(f"bad value {key} = {value!r}") from None
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if not counts:
        raise ConfigError("config defines no class counts")
    params = {sc: default_params(sc) for sc in counts}
    for rank, target, name, value in sorted(overrides, key=lambda o: o[0]):
        parsed = _parse_param(name, value)
        for sc in counts:
            if rank == 0 or (rank == 1 and sc.label[:3] == target) or (
                    rank == 2 and sc == SourceClass.parse(target)):
                params[sc] = replace(params[sc], **{name: parsed})
    return SynthConfig(counts, params, int(scalars["length"]), float(scalars["sample_rate"]),
                       int(scalars["master_seed"]), float(scalars["path_loss_jitter"]))


def load_config(path) -> SynthConfig:
    return config_from_mapping(parse_kv_file(path))


def config_from_text(text: str) -> SynthConfig:
    return config_from_mapping(parse_kv_text(text))
