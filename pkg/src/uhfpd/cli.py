"""Command-line entry point: ``uhfpd <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 leakage between training and evaluation records.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, format_kv, parse_kv_file
from .dataset import DomainTag, SourceClass, load, save, stratified_split
from .exceptions import ConfigError, DataError, LeakageDetected, PDError
from .preprocess import FeaturePipeline, NormScheme, parse_domain

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_LEAKAGE = 4

MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("PD_BENCH_JOBS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PD_BENCH_JOBS must be an integer, got {env!r}") from None
    return 1


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed: int, inputs=()) -> Path:
    """One manifest per output directory: config hash, seed, version and input digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: str(v) for k, v in config.items()}
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _save(data, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save(data, path)


def _classes(text: str | None):
    if not text:
        return None
    return [SourceClass.parse(t) for t in text.split(",") if t.strip()]


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import desk_config, load_config, paper_config, synth_dataset

    if args.config:
        cfg = load_config(args.config)
        inputs = [args.config]
    elif args.scale == "paper":
        cfg, inputs = paper_config(), []
    else:
        cfg = desk_config(args.per_class, args.length, _classes(args.classes))
        inputs = []
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.path_loss_jitter is not None:
        cfg = replace(cfg, path_loss_jitter=args.path_loss_jitter)
    data = synth_dataset(cfg, _jobs(args))
    _save(data, args.out)
    settings = {"length": cfg.length, "sample_rate": cfg.sample_rate,
                "path_loss_jitter": cfg.path_loss_jitter,
                **{f"count.{sc.label}": n for sc, n in cfg.counts.items()}}
    write_manifest(Path(args.out).parent, "synth", settings, cfg.master_seed, inputs)
    print(json.dumps({"out": str(args.out), "n": len(data), "length": data.length,
                      "classes": {sc.label: n for sc, n in data.class_counts().items()}}))
    return EXIT_OK


def cmd_normalize(args) -> int:
    data = load(args.data)
    fit_on = load(args.fit_on) if args.fit_on else data
    pipe = FeaturePipeline(NormScheme.parse(args.scheme), parse_domain(args.domain), args.n_fft)
    pipe.fit(fit_on)
    feats = pipe.transform_dataset(data)
    _save(feats, args.out)
    stats = Path(args.out).with_suffix(".features.cfg")
    stats.write_text(format_kv(pipe.to_mapping()))
    inputs = [args.data] + ([args.fit_on] if args.fit_on else [])
    write_manifest(Path(args.out).parent, "normalize",
                   {"scheme": pipe.scheme.value, "domain": args.domain, "n_fft": args.n_fft},
                   0, inputs)
    print(json.dumps({"out": str(args.out), "n": len(feats), "length": feats.length,
                      "stats": str(stats)}))
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig

    return TrainConfig(epochs=args.epochs, n_seeds=1, scheme=args.scheme,
                       domain=args.domain, master_seed=args.seed)


def cmd_train(args) -> int:
    from .nn import save_checkpoint
    from .trainer import evaluate, metrics_csv, aggregate, train

    data = load(args.data)
    classes = _classes(args.classes)
    if classes:
        data = data.select(classes)
    if len(data) == 0:
        raise DataError("no records of the requested classes")
    cfg = _train_config(args)
    split = stratified_split(data, cfg.split_fraction, args.seed)
    _progress(f"training on {len(split.train)} records, testing on {len(split.test)}")
    model = train(split, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.classifier.network_, out / "model.pdnn")
    (out / "features.cfg").write_text(format_kv(model.features.to_mapping()))
    np.savetxt(out / "train_ids.txt", np.sort(model.train_ids), fmt="%d")
    report = aggregate([evaluate(model, split.test)])
    (out / "metrics.csv").write_text(metrics_csv(report))
    write_manifest(out, "train", cfg.as_dict(), args.seed, [args.data])
    print(json.dumps({"A_bar": report.a_bar, "n_train": len(split.train),
                      "n_test": len(split.test), "best_epoch": model.classifier.best_epoch_}))
    return EXIT_OK


def load_model(model_dir):
    """Rebuild a :class:`TrainedModel` saved by ``train``."""
    from .nn import load_checkpoint
    from .trainer import CNNClassifier, TrainedModel

    model_dir = Path(model_dir)
    for name in ("features.cfg", "model.pdnn", "train_ids.txt"):
        if not (model_dir / name).is_file():
            raise DataError(f"{model_dir} is not a model directory (missing {name})")
    try:
        features = FeaturePipeline.from_mapping(parse_kv_file(model_dir / "features.cfg"))
        net = load_checkpoint(model_dir / "model.pdnn")
        train_ids = np.atleast_1d(np.loadtxt(model_dir / "train_ids.txt", dtype=np.int64))
    except OSError as exc:
        raise DataError(f"cannot load model from {model_dir}: {exc}") from None
    spec = net.spec
    clf = CNNClassifier(spec.channels, spec.kernel, spec.stride, spec.pool_window, spec.hidden)
    clf.network_ = net
    clf.classes_ = np.arange(4)
    clf.n_features_in_ = spec.input_length
    return TrainedModel(features, clf, train_ids, net.init_seed)


def cmd_evaluate(args) -> int:
    from .trainer import aggregate, evaluate, generalization_rate, metrics_csv

    model = load_model(args.model)
    data = load(args.data)
    if args.unseen_only:
        data = data.take(np.flatnonzero(~np.isin(data.ids, model.train_ids)))
    holdout = SourceClass.parse(args.holdout) if args.holdout else None
    test = data.select([c for c in data.source_classes() if c != holdout])
    g_runs, n_holdout = [], 0
    if holdout is not None:
        held = data.select([holdout])
        if len(held) == 0:
            raise DataError(f"no records of holdout class {holdout}")
        g_runs, n_holdout = [generalization_rate(model, held)], len(held)
    if len(test) == 0:
        raise DataError("no evaluation records")
    report = aggregate([evaluate(model, test)], g_runs, n_holdout)
    text = metrics_csv(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import ExperimentPlan, Scale, final_report, load_plan, run_experiment

    plan = load_plan(args.plan) if args.plan else ExperimentPlan()
    scale = Scale.named(args.scale).with_overrides(plan.overrides)
    parts = tuple(p.strip() for p in args.parts.split(",") if p.strip())
    bad = set(parts) - {"baseline", "transfer"}
    if bad or not parts:
        raise ConfigError(f"--parts takes baseline and/or transfer, got {args.parts!r}")
    t0 = time.time()
    grid, curve = run_experiment(plan, scale, args.seed, parts, _jobs(args), _progress)
    written = final_report(curve, grid, args.out)
    settings = {**{f"plan.{k}": v for k, v in plan.to_mapping().items()},
                **{f"scale.{k}": v for k, v in scale.as_dict().items()},
                "parts": ",".join(parts)}
    write_manifest(args.out, "experiment", settings, args.seed,
                   [args.plan] if args.plan else [])
    _progress(f"done in {time.time() - t0:.0f}s")
    summary = {"out": str(args.out), "files": sorted(written)}
    if grid is not None:
        summary["A_bar"] = {f"{s.short}/{'time' if d is DomainTag.TIME else 'fft'}": r.a_bar
                            for (s, d), (r, _) in grid.cells.items()}
    if curve is not None:
        summary["G"] = {f"{s.short}/{o}": curve.g_values(s, o) for s, o in curve.curves}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiments import svg_heatmap, svg_line_chart

    src = Path(args.dir) / "report.json"
    try:
        payload = json.loads(src.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {src}: {exc}") from None
    lines = []
    for cell in payload.get("grid", []):
        ref = cell.get("reference_A_bar")
        lines.append(f"grid {cell['scheme']:<12}{cell['domain']:<5} A_bar={cell['A_bar']:.4f}"
                     + (f" (reference {ref:.4f})" if ref is not None else ""))
    series = {}
    for c in payload.get("transfer", []):
        g = [v if v is not None else float("nan") for v in c["G"]]
        series[f"{c['scheme']} {c['order']}"] = g
        lines.append(f"transfer {c['scheme']:<12}{c['order']:<8} G=" +
                     " ".join(f"{v:.3f}" for v in g))
    if args.svg and series:
        n = max(len(v) for v in series.values())
        Path(args.dir, "curve.svg").write_text(
            svg_line_chart(series, [str(i) for i in range(n)], "G", "additions"))
        final = payload.get("final")
        if final:
            Path(args.dir, "confusion.svg").write_text(
                svg_heatmap(np.array(final["mean_rates"], dtype=float), final["labels"],
                            f"{final['scheme']} {final['order']}"))
    print("\n".join(lines))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uhfpd", description="UHF partial-discharge CNN benchmark")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default: $PD_BENCH_JOBS or 1)")

    sp = sub.add_parser("synth", help="generate a synthetic data set")
    sp.add_argument("--config", help="key = value generator config")
    sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
    sp.add_argument("--per-class", type=int, default=400)
    sp.add_argument("--length", type=int, default=2000)
    sp.add_argument("--classes", help="comma-separated source classes (default: all)")
    sp.add_argument("--path-loss-jitter", type=float, default=None)
    sp.add_argument("--out", required=True)
    common(sp, seed_default=None)  # None keeps the config file's master_seed
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("normalize", help="write normalized features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit-on", help="fit statistics on this file (default: --data)")
    sp.add_argument("--scheme", default="measurement")
    sp.add_argument("--domain", default="time")
    sp.add_argument("--n-fft", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_normalize)

    sp = sub.add_parser("train", help="split, train one model and test it")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classes")
    sp.add_argument("--scheme", default="measurement")
    sp.add_argument("--domain", default="time")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--holdout", help="source class scored as generalization rate")
    sp.add_argument("--unseen-only", action="store_true",
                    help="skip records the model was trained on instead of failing")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="run the baseline grid and/or transfer curves")
    sp.add_argument("--plan", help="key = value experiment plan")
    sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
    sp.add_argument("--parts", default="baseline,transfer")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="summarize an experiment directory")
    sp.add_argument("dir")
    sp.add_argument("--svg", action="store_true", help="re-render the charts")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except LeakageDetected as exc:
        print(f"error: leakage: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
