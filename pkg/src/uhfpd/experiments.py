"""Normalization/input-domain grid and the transfer experiment over U_i multiples.

The transfer experiment keeps one source class (by default Pa+ at 1.5 U_i)
out of every training set and measures how often its records are still
assigned to the right output class while further U_i multiples are added to
training, one class at a time, in two orders.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import parse_kv_file, parse_kv_text
from .dataset import PAPER_LENGTH, TABLE1_COUNTS, Dataset, DomainTag, OutputClass, SourceClass
from .exceptions import ConfigError, InvalidParams, LeakageDetected, MissingClass
from .preprocess import NormScheme, parse_domain
from .synth import SynthConfig, desk_config
from .trainer import MetricsReport, RunResult, TrainConfig, run_seeds

BASE_CLASSES = tuple(SourceClass.parse(s) for s in ("Pa-1", "Pa+1", "Pr-2", "Pr+2"))
HOLDOUT_CLASS = SourceClass.parse("Pa+1.5")
ORDER_1 = tuple(SourceClass.parse(s) for s in ("Pa-1.5", "Pa-3", "Pa+1.25", "Pr-3"))
ORDER_2 = tuple(reversed(ORDER_1))

# Published reference values for the measured data set. They are annotations
# for comparing qualitative ordering only.
REFERENCE_GRID = {
    (NormScheme.TRAINSET, DomainTag.TIME): 0.9653,
    (NormScheme.MEASUREMENT, DomainTag.TIME): 0.9977,
    (NormScheme.TRAINSET, DomainTag.FREQ): 0.8048,
    (NormScheme.MEASUREMENT, DomainTag.FREQ): 0.9983,
}
REFERENCE_G_BASE = {
    NormScheme.TRAINSET: 0.6801,
    NormScheme.CLASS: 0.4010,
    NormScheme.MEASUREMENT: 0.2085,
}
REFERENCE_G_FULL = {
    (NormScheme.TRAINSET, "order1"): 0.9982,
    (NormScheme.CLASS, "order2"): 0.9578,
    (NormScheme.MEASUREMENT, "order1"): 0.8672,
}

Progress = Callable[[str], None]


# -- plan --------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    """Which classes are trained, held out and added, and which cells are run."""

    base_classes: tuple[SourceClass, ...] = BASE_CLASSES
    holdout_class: SourceClass = HOLDOUT_CLASS
    orders: tuple[tuple[str, tuple[SourceClass, ...]], ...] = (
        ("order1", ORDER_1), ("order2", ORDER_2))
    schemes: tuple[NormScheme, ...] = tuple(NormScheme)
    domains: tuple[DomainTag, ...] = (DomainTag.TIME, DomainTag.FREQ)
    transfer_domain: DomainTag = DomainTag.TIME
    # scale settings overridden by the plan file, see Scale.with_overrides
    overrides: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "orders", tuple((n, tuple(o)) for n, o in self.orders))
        object.__setattr__(self, "schemes", tuple(NormScheme.parse(s) for s in self.schemes))
        object.__setattr__(self, "domains", tuple(parse_domain(d) for d in self.domains))
        object.__setattr__(self, "transfer_domain", parse_domain(self.transfer_domain))
        self.validate()

    def validate(self) -> None:
        if not self.base_classes:
            raise InvalidParams("plan needs at least one base class")
        if len(set(self.base_classes)) != len(self.base_classes):
            raise InvalidParams("duplicate base class")
        if self.holdout_class in self.base_classes:
            raise InvalidParams(f"holdout class {self.holdout_class} is also a base class")
        names = [n for n, _ in self.orders]
        if len(set(names)) != len(names):
            raise InvalidParams("duplicate order name")
        for name, order in self.orders:
            if self.holdout_class in order:
                raise InvalidParams(f"holdout class {self.holdout_class} appears in {name}")
            if len(set(order)) != len(order):
                raise InvalidParams(f"{name} lists a class twice")
            both = set(order) & set(self.base_classes)
            if both:
                raise InvalidParams(f"{name} re-adds base class {sorted(both)[0]}")
        if not self.schemes or not self.domains:
            raise InvalidParams("plan needs at least one scheme and one domain")

    def classes(self) -> list[SourceClass]:
        """Every class the plan touches, holdout included."""
        out = set(self.base_classes) | {self.holdout_class}
        for _, order in self.orders:
            out |= set(order)
        return sorted(out)

    def steps(self, order: Sequence[SourceClass]) -> list[tuple[SourceClass, ...]]:
        """Training class sets: the base set, then one more addition per step."""
        return [self.base_classes + tuple(order[:k]) for k in range(len(order) + 1)]

    def to_mapping(self) -> dict[str, str]:
        out = {
            "base": ", ".join(c.label for c in self.base_classes),
            "holdout": self.holdout_class.label,
        }
        for name, order in self.orders:
            out[f"order.{name}"] = ", ".join(c.label for c in order)
        out["schemes"] = ", ".join(s.value for s in self.schemes)
        out["domains"] = ", ".join(_domain_name(d) for d in self.domains)
        out["transfer_domain"] = _domain_name(self.transfer_domain)
        out.update(self.overrides)
        return out


def _domain_name(d: DomainTag) -> str:
    return "time" if d is DomainTag.TIME else "fft"


def _classes(text: str) -> tuple[SourceClass, ...]:
    return tuple(SourceClass.parse(t) for t in text.split(",") if t.strip())


def plan_from_mapping(kv: Mapping[str, str]) -> ExperimentPlan:
    """Build a plan from ``key = value`` pairs; absent keys keep their defaults.

    Keys: ``base``, ``holdout``, ``order.<name>`` (repeatable), ``schemes``,
    ``domains``, ``transfer_domain`` and any :class:`Scale` field.
    """
    kwargs: dict = {}
    orders = []
    overrides = {}
    for key, value in kv.items():
        if key == "base":
            kwargs["base_classes"] = _classes(value)
        elif key == "holdout":
            kwargs["holdout_class"] = SourceClass.parse(value)
        elif key.startswith("order."):
            orders.append((key[len("order."):], _classes(value)))
        elif key == "schemes":
            kwargs["schemes"] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key == "domains":
            kwargs["domains"] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key == "transfer_domain":
            kwargs["transfer_domain"] = value
        elif key in _SCALE_FIELDS:
            overrides[key] = value
        else:
            raise ConfigError(f"unknown plan key {key!r}")
    if orders:
        kwargs["orders"] = tuple(orders)
    Scale.desk().with_overrides(overrides)  # type-check early
    return ExperimentPlan(**kwargs, overrides=overrides)


def load_plan(path) -> ExperimentPlan:
    return plan_from_mapping(parse_kv_file(path))


def plan_from_text(text: str) -> ExperimentPlan:
    return plan_from_mapping(parse_kv_text(text))


# -- scale -------------------------------------------------------------------

@dataclass(frozen=True)
class Scale:
    """Data sizes and run counts. ``*_per_class=None`` uses the measured class counts."""

    name: str
    baseline_per_class: int | None
    baseline_length: int
    baseline_jitter: float
    transfer_per_class: int | None
    transfer_length: int
    transfer_jitter: float
    n_seeds: int
    epochs: int = 30

    @classmethod
    def desk(cls) -> "Scale":
        return cls("desk", 400, 2000, 5.0, 120, 1000, 0.0, 5)

    @classmethod
    def paper(cls) -> "Scale":
        return cls("paper", None, PAPER_LENGTH, 5.0, None, PAPER_LENGTH, 0.0, 15)

    @classmethod
    def named(cls, name: str) -> "Scale":
        if name == "desk":
            return cls.desk()
        if name == "paper":
            return cls.paper()
        raise ConfigError(f"unknown scale {name!r} (expected desk or paper)")

    def with_overrides(self, kv: Mapping[str, str]) -> "Scale":
        changes = {}
        for key, text in kv.items():
            if key not in _SCALE_FIELDS:
                raise ConfigError(f"unknown scale setting {key!r}")
            try:
                if key.endswith("per_class"):
                    changes[key] = None if text.strip().lower() in ("table1", "none") else int(text)
                elif key.endswith("jitter"):
                    changes[key] = float(text)
                else:
                    changes[key] = int(text)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {text!r}") from None
        return replace(self, **changes)

    def _data(self, classes, per_class, length, jitter, seed) -> SynthConfig:
        if per_class is None:
            return SynthConfig({c: TABLE1_COUNTS[c] for c in classes}, length=length,
                               master_seed=seed, path_loss_jitter=jitter)
        return desk_config(per_class, length, classes, seed, jitter)

    def baseline_data(self, plan: ExperimentPlan, seed: int) -> SynthConfig:
        return self._data(plan.base_classes, self.baseline_per_class, self.baseline_length,
                          self.baseline_jitter, seed)

    def transfer_data(self, plan: ExperimentPlan, seed: int) -> SynthConfig:
        return self._data(plan.classes(), self.transfer_per_class, self.transfer_length,
                          self.transfer_jitter, seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, n_seeds=self.n_seeds, master_seed=seed)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_SCALE_FIELDS = {f.name for f in fields(Scale)} - {"name"}


# -- baseline grid -----------------------------------------------------------

@dataclass
class GridResult:
    """Mean true-positive rates per (scheme, domain) cell."""

    cells: dict[tuple[NormScheme, DomainTag], tuple[MetricsReport, list[RunResult]]]

    def report(self, scheme, domain) -> MetricsReport:
        return self.cells[(NormScheme.parse(scheme), parse_domain(domain))][0]

    def a_bar(self, scheme, domain) -> float:
        return self.report(scheme, domain).a_bar

    def to_csv(self) -> str:
        labels = [c.short for c in OutputClass]
        rows = [["scheme", "domain", *(f"A_{c}" for c in labels), "A_bar", "n_runs",
                 "reference_A_bar"]]
        for (scheme, domain), (rep, _) in self.cells.items():
            ref = REFERENCE_GRID.get((scheme, domain))
            rows.append([scheme.short, _domain_name(domain), *map(_fmt, rep.per_class),
                         _fmt(rep.a_bar), str(rep.n_runs), "" if ref is None else f"{ref:.4f}"])
        return _csv(rows)


def run_baseline(plan: ExperimentPlan, data: Dataset, cfg: TrainConfig, n_jobs: int = 1,
                 progress: Progress | None = None) -> GridResult:
    """One multi-seed train/evaluate cycle on the base classes per grid cell."""
    _require(data, plan.base_classes)
    cells = {}
    for scheme in plan.schemes:
        for domain in plan.domains:
            if progress:
                progress(f"baseline {scheme.short}/{_domain_name(domain)}")
            cell_cfg = replace(cfg, scheme=scheme, domain=domain)
            cells[(scheme, domain)] = run_seeds(data, plan.base_classes, cell_cfg,
                                                n_jobs=n_jobs, progress=progress)
    return GridResult(cells)


# -- transfer curve ----------------------------------------------------------

@dataclass
class TransferStep:
    step: int
    added: SourceClass | None
    train_classes: tuple[SourceClass, ...]
    report: MetricsReport
    results: list[RunResult]

    @property
    def g(self) -> float:
        return self.report.g


@dataclass
class TransferCurve:
    holdout: SourceClass
    curves: dict[tuple[NormScheme, str], list[TransferStep]]

    def steps(self, scheme, order: str) -> list[TransferStep]:
        return self.curves[(NormScheme.parse(scheme), order)]

    def g_values(self, scheme, order: str) -> list[float]:
        return [s.g for s in self.steps(scheme, order)]

    def rise(self, scheme, order: str) -> float:
        g = self.g_values(scheme, order)
        return g[-1] - g[0]

    def to_csv(self, scheme, order: str) -> str:
        """Per-run and mean G and A_bar after every step."""
        scheme = NormScheme.parse(scheme)
        rows = [["step", "added", "run_id", "G", "A_bar", "A_tilde"]]
        steps = self.steps(scheme, order)
        for s in steps:
            added = s.added.label if s.added else "base"
            for r in s.results:
                rows.append([str(s.step), added, str(r.seed), _fmt(r.g),
                             _fmt(r.confusion.mean_true_positive_rate()), ""])
            rows.append([str(s.step), added, "mean", _fmt(s.g), _fmt(s.report.a_bar),
                         _fmt(s.report.a_tilde)])
        return _csv(rows)


def run_transfer(plan: ExperimentPlan, data: Dataset, cfg: TrainConfig, n_jobs: int = 1,
                 progress: Progress | None = None) -> TransferCurve:
    """G on the held-out class after each cumulative addition, per scheme and order.

    Every step trains from scratch. Steps with the same training class set
    (the base set, and the full set reached by every order) are run once.
    """
    _require(data, plan.classes())
    cache: dict[tuple[frozenset, NormScheme], tuple[MetricsReport, list[RunResult]]] = {}
    curves = {}
    for scheme in plan.schemes:
        step_cfg = replace(cfg, scheme=scheme, domain=plan.transfer_domain)
        for name, order in plan.orders:
            steps = []
            for k, classes in enumerate(plan.steps(order)):
                if plan.holdout_class in classes:
                    raise LeakageDetected(f"holdout class {plan.holdout_class} in step {k}")
                key = (frozenset(classes), scheme)
                if key not in cache:
                    if progress:
                        progress(f"transfer {scheme.short} {name} step {k}: "
                                 + ", ".join(c.label for c in classes))
                    cache[key] = run_seeds(data, classes, step_cfg, holdout=plan.holdout_class,
                                           n_jobs=n_jobs, progress=progress)
                rep, results = cache[key]
                steps.append(TransferStep(k, order[k - 1] if k else None, classes, rep, results))
            curves[(scheme, name)] = steps
    return TransferCurve(plan.holdout_class, curves)


def _require(data: Dataset, classes) -> None:
    present = set(data.sources)
    missing = [c for c in classes if c not in present]
    if missing:
        raise MissingClass("dataset lacks source class(es) " + ", ".join(map(str, missing)))


# -- whole experiment --------------------------------------------------------

def run_experiment(plan: ExperimentPlan, scale: Scale, seed: int, parts=("baseline", "transfer"),
                   n_jobs: int = 1, progress: Progress | None = None,
                   baseline_data: Dataset | None = None, transfer_data: Dataset | None = None):
    """Synthesize the data (unless given) and run the requested parts.

    Returns ``(grid, curve)``; a part that was not requested is ``None``.
    """
    from .synth import synth_dataset

    scale = scale.with_overrides(plan.overrides)
    cfg = scale.train_config(seed)
    grid = curve = None
    if "baseline" in parts:
        if baseline_data is None:
            baseline_data = synth_dataset(scale.baseline_data(plan, seed), n_jobs)
        grid = run_baseline(plan, baseline_data, cfg, n_jobs, progress)
    if "transfer" in parts:
        if transfer_data is None:
            transfer_data = synth_dataset(scale.transfer_data(plan, seed), n_jobs)
        curve = run_transfer(plan, transfer_data, cfg, n_jobs, progress)
    return grid, curve


# -- report ------------------------------------------------------------------

CLASS_SCHEME_CAVEAT = ("Class-scheme test records are normalized with the range of their true "
                       "source class, so their inputs depend on the label being predicted.")

def final_report(curve: TransferCurve | None, grid: GridResult | None, out_dir,
                 scheme=NormScheme.TRAINSET, order: str | None = None) -> dict[str, Path]:
    """Write CSV tables, SVG charts and a JSON summary to ``out_dir``.

    The confusion heatmap shows the full-set step of ``(scheme, order)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text)
        written[name] = path

    summary: dict = {}
    if grid is not None:
        put("grid.csv", grid.to_csv())
        summary["grid"] = [
            {"scheme": s.value, "domain": _domain_name(d), **rep.to_dict(),
             "reference_A_bar": REFERENCE_GRID.get((s, d))}
            for (s, d), (rep, _) in grid.cells.items()]
    if curve is not None:
        series = {}
        for (s, name), steps in curve.curves.items():
            put(f"transfer_{s.value}_{name}.csv", curve.to_csv(s, name))
            series[f"{s.short} {name}"] = [st.g for st in steps]
        scheme = NormScheme.parse(scheme)
        if (scheme, order) not in curve.curves:
            order = next(n for s, n in curve.curves if s is scheme) if any(
                s is scheme for s, _ in curve.curves) else None
        if order is None:
            scheme, order = next(iter(curve.curves))
        final = curve.curves[(scheme, order)][-1]
        labels = [c.short for c in OutputClass]
        put("confusion.csv", _csv([["truth", *labels]] + [
            [labels[i], *map(_fmt, row)] for i, row in enumerate(final.report.mean_rates)]))
        put("confusion.svg", svg_heatmap(
            final.report.mean_rates, labels,
            f"{scheme.short} {order}, all additions: A_bar={final.report.a_bar:.4f}, "
            f"G={final.g:.4f}"))
        n_steps = max(len(v) for v in series.values())
        put("curve.svg", svg_line_chart(series, [str(i) for i in range(n_steps)],
                                        f"G on {curve.holdout.label}", "additions"))
        summary["transfer"] = [
            {"scheme": s.value, "order": name, "G": [st.g for st in steps],
             "A_bar": [st.report.a_bar for st in steps],
             "A_tilde": [st.report.a_tilde for st in steps],
             "run_G": [st.report.run_g for st in steps],
             "added": [st.added.label if st.added else None for st in steps],
             "reference_G_base": REFERENCE_G_BASE.get(s),
             "reference_G_full": REFERENCE_G_FULL.get((s, name))}
            for (s, name), steps in curve.curves.items()]
        summary["final"] = {"scheme": scheme.value, "order": order, **final.report.to_dict()}
    used = {s for s, _ in (grid.cells if grid else ())} | {s for s, _ in (curve.curves if curve else ())}
    if NormScheme.CLASS in used:
        summary["caveats"] = [CLASS_SCHEME_CAVEAT]
    put("report.json", json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if np.isnan(obj) else round(float(obj), 12)
    return obj


def _fmt(v) -> str:
    return "nan" if v is None or np.isnan(v) else f"{float(v):.6f}"


def _csv(rows) -> str:
    return "".join(",".join(r) + "\n" for r in rows)


# -- SVG ---------------------------------------------------------------------

def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def svg_heatmap(matrix, labels: Sequence[str], title: str = "") -> str:
    """Row-normalized confusion matrix; rows are true classes."""
    m = np.asarray(matrix, dtype=float)
    n = len(labels)
    cell, left, top = 70, 60, 50
    w, h = left + n * cell + 20, top + n * cell + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{w / 2:.1f}" y="20" text-anchor="middle">{_esc(title)}</text>']
    for i in range(n):
        parts.append(f'<text x="{left - 8}" y="{top + i * cell + cell / 2 + 4:.1f}" '
                     f'text-anchor="end">{_esc(labels[i])}</text>')
        parts.append(f'<text x="{left + i * cell + cell / 2:.1f}" y="{top + n * cell + 18}" '
                     f'text-anchor="middle">{_esc(labels[i])}</text>')
        for j in range(n):
            v = 0.0 if np.isnan(m[i, j]) else float(m[i, j])
            shade = int(round(255 * (1 - v)))
            ink = "#fff" if v > 0.5 else "#000"
            x, y = left + j * cell, top + i * cell
            text = "nan" if np.isnan(m[i, j]) else f"{v:.3f}"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="#888"/>')
            parts.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" '
                         f'text-anchor="middle" fill="{ink}">{text}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def svg_line_chart(series: Mapping[str, Sequence[float]], x_labels: Sequence[str],
                   title: str = "", x_title: str = "") -> str:
    """Lines over shared x positions, y fixed to [0, 1]."""
    left, top, pw, ph = 50, 40, 420, 240
    w, h = left + pw + 150, top + ph + 50
    n = max(len(x_labels), 2)

    def px(i):
        return left + pw * i / (n - 1)

    def py(v):
        return top + ph * (1 - v)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle">{_esc(title)}</text>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    for k in range(6):
        v = k / 5
        parts.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    for i, lab in enumerate(x_labels):
        parts.append(f'<text x="{px(i):.1f}" y="{top + ph + 16}" '
                     f'text-anchor="middle">{_esc(lab)}</text>')
    if x_title:
        parts.append(f'<text x="{left + pw / 2:.1f}" y="{top + ph + 36}" '
                     f'text-anchor="middle">{_esc(x_title)}</text>')
    for k, (name, values) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = [(px(i), py(v)) for i, v in enumerate(values) if v is not None and not np.isnan(v)]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                         f'stroke-width="2"/>')
            parts.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>'
                         for x, y in pts)
        ly = top + 10 + 16 * k
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{_esc(name)}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)
