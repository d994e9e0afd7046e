"""Command-line entry point: synth, train, score, eval, benchmark, replay."""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines, data, evaluation, gan, inversion, plotting
from .config import ConfigError, RunConfig, load_config, resolve_out_dir
from .corenn import ConfigurationError, UsageError

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


# --- run bookkeeping ------------------------------------------------------------

@dataclass
class Run:
    command: str
    cfg: RunConfig
    out: Path
    args: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def stage(self, name: str):
        return _StageTimer(self, name)

    def produced(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(os.path.relpath(path, self.out))
        return path

    def write_manifest(self) -> Path:
        doc = {
            "command": self.command,
            "args": self.args,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.run.seed,
            "version": _version(),
            "stages": self.stages,
            "artifacts": sorted(set(self.artifacts)),
            "failures": self.failures,
        }
        return atomic_write_text(self.out / f"manifest_{self.command}.json",
                                 json.dumps(doc, indent=2) + "\n")


class _StageTimer:
    def __init__(self, run: Run, name: str):
        self.run, self.name = run, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.run.stages[self.name] = round(time.perf_counter() - self.t0, 3)


def atomic_write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


# --- per-dataset work -----------------------------------------------------------

@dataclass
class Dataset:
    name: str          # file stem, used for output directories
    key: str           # key into the label document
    series: data.TimeSeries
    normalized: data.TimeSeries
    train: data.WindowSet
    test: data.WindowSet
    spans: Optional[list]

    @property
    def labels(self) -> Optional[np.ndarray]:
        return None if self.spans is None else data.label_windows(self.test, self.spans)


def load_dataset(cfg: RunConfig, path, need_labels: bool = False) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise data.DataError(f"series file not found: {path}")
    series = data.load_series(path)
    key = cfg.dataset_key(path)
    spans = None
    if cfg.data.labels:
        if not Path(cfg.data.labels).exists():
            raise data.DataError(f"label file not found: {cfg.data.labels}")
        spans = data.load_labels(cfg.data.labels, key)
    elif need_labels:
        raise ConfigError("this command needs [data] labels")
    normalized, params = data.normalize(series)
    s_w = cfg.data.s_w
    return Dataset(path.stem, key, series, normalized,
                   data.sliding_windows(normalized, s_w, 1, params),
                   data.sliding_windows(normalized, s_w, s_w, params), spans)


def _datasets(cfg: RunConfig) -> list[str]:
    if not cfg.data.series:
        raise ConfigError("no input series; set [data] series or pass --set data.series=PATH")
    return list(cfg.data.series)


def score_model(model_name: str, cfg: RunConfig, ds: Dataset, cell_dir: Path,
                checkpoint: Optional[Path] = None):
    """Fit (or load) one model on one dataset and return its score series."""
    key = ds.key
    if model_name == "lstm_gan":
        if checkpoint is not None:
            model = gan.load_checkpoint(checkpoint)
        else:
            model, stats = gan.adversarial_train(ds.train, cfg.stage_config("gan", key))
            gan.save_checkpoint(model, cell_dir / "model.ckpt")
            stats.to_csv(cell_dir / "train_stats.csv")
        if model.config.s_w != cfg.data.s_w:
            raise ConfigurationError(
                f"checkpoint window length {model.config.s_w} != configured s_w {cfg.data.s_w}")
        return inversion.anomaly_scores(model, ds.test, cfg.stage_config("inversion", key))
    if model_name == "isoforest":
        return baselines.iso_forest_score(ds.test, cfg.stage_config("isoforest", key),
                                          fit_windows=ds.train)
    if model_name == "gmm":
        fit = baselines.gmm_fit(ds.train, cfg.stage_config("gmm", key))
        return baselines.gmm_score(fit, ds.test)
    if model_name == "vanlstm":
        return baselines.van_lstm_score(ds.normalized, cfg.stage_config("vanlstm", key),
                                        cfg.data.s_w, ds.test)
    raise ConfigError(f"unknown model {model_name!r}")


def _run_cell(model_name: str, cfg_doc: dict, path: str, cell_dir: str):
    """Worker entry point for one (model, dataset) cell; returns (report, seconds)."""
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(cfg_doc)
    ds = load_dataset(cfg, path, need_labels=True)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    scores = score_model(model_name, cfg, ds, cell_dir)
    scores.model = model_name
    scores.to_csv(cell_dir / "scores.csv")
    report = evaluation.evaluate(scores, ds.labels, cfg.threshold(), model=model_name, dataset=ds.key)
    plotting.plot_scores(scores, cell_dir / "scores.svg", threshold=report.threshold,
                         spans=ds.spans, title=f"{model_name} on {ds.key}")
    return report, time.perf_counter() - t0


# --- commands -------------------------------------------------------------------

def cmd_synth(run: Run, count: int, length: int) -> None:
    spans_by_key = {}
    with run.stage("synth"):
        for k in range(count):
            spec = data.SynthSpec(length=length, seed=run.cfg.run.seed + k)
            name = f"synth_{k}.csv"
            series, spans = data.make_synthetic(spec, name)
            data.write_series(series, run.produced(run.out / name))
            spans_by_key[name] = spans
        data.write_labels(spans_by_key, run.produced(run.out / "labels.json"))
        const = data.make_constant(seed=run.cfg.run.seed)
        data.write_series(const, run.produced(run.out / "constant.csv"))


def cmd_train(run: Run) -> None:
    for path in _datasets(run.cfg):
        ds = load_dataset(run.cfg, path)
        target = run.out / ds.name
        target.mkdir(parents=True, exist_ok=True)
        with run.stage(f"train:{ds.name}"):
            model, stats = gan.adversarial_train(ds.train, run.cfg.stage_config("gan", ds.key))
        gan.save_checkpoint(model, run.produced(target / "model.ckpt"))
        stats.to_csv(run.produced(target / "train_stats.csv"))
        plotting.plot_training(stats, run.produced(target / "train_loss.svg"), title=ds.key)


def cmd_score(run: Run, checkpoint: Optional[str]) -> None:
    paths = _datasets(run.cfg)
    if checkpoint and len(paths) > 1:
        raise ConfigError("--checkpoint applies to a single series; several are configured")
    for path in paths:
        ds = load_dataset(run.cfg, path)
        target = run.out / ds.name
        ckpt = Path(checkpoint) if checkpoint else target / "model.ckpt"
        if not ckpt.exists():
            raise ConfigError(f"checkpoint not found: {ckpt} (run 'tsgan train' first or pass --checkpoint)")
        model = gan.load_checkpoint(ckpt)
        if model.config.s_w != run.cfg.data.s_w:
            raise ConfigurationError(
                f"checkpoint window length {model.config.s_w} != configured s_w {run.cfg.data.s_w}")
        target.mkdir(parents=True, exist_ok=True)
        with run.stage(f"score:{ds.name}"):
            scores = inversion.anomaly_scores(model, ds.test, run.cfg.stage_config("inversion", ds.key))
        scores.to_csv(run.produced(target / "scores.csv"))
        thr = None
        if ds.spans is not None:
            thr = evaluation.evaluate(scores, ds.labels, run.cfg.threshold()).threshold
        elif run.cfg.threshold().kind == "quantile":
            thr = evaluation.apply_threshold(scores, run.cfg.threshold())[1]
        plotting.plot_scores(scores, run.produced(target / "scores.svg"), threshold=thr,
                             spans=ds.spans or (), title=ds.key)


def cmd_eval(run: Run, scores_path: Optional[str]) -> None:
    paths = _datasets(run.cfg)
    if scores_path and len(paths) > 1:
        raise ConfigError("--scores applies to a single series; several are configured")
    reports = []
    for path in paths:
        ds = load_dataset(run.cfg, path, need_labels=True)
        src = Path(scores_path) if scores_path else run.out / ds.name / "scores.csv"
        if not src.exists():
            raise ConfigError(f"score file not found: {src} (run 'tsgan score' first or pass --scores)")
        scores = inversion.read_scores_csv(src)
        if len(scores) != len(ds.test):
            raise ConfigurationError(
                f"{src} has {len(scores)} windows but {ds.key} yields {len(ds.test)} at s_w={run.cfg.data.s_w}")
        reports.append(evaluation.evaluate(scores, ds.labels, run.cfg.threshold(),
                                           model=scores.model, dataset=ds.key))
    evaluation.write_reports_csv(reports, run.produced(run.out / "report.csv"))


def cmd_benchmark(run: Run, jobs: int, keep_going: bool) -> None:
    cfg = run.cfg
    models = list(dict.fromkeys(cfg.run.models))
    if len(models) < 2:
        raise ConfigError("benchmark needs at least two models in [run] models")
    paths = _datasets(cfg)
    names = [Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        raise ConfigError(f"series file names must be distinct: {names}")
    cfg_doc = cfg.to_dict()
    cells = [(m, p, run.out / "cells" / f"{m}__{Path(p).stem}") for p in paths for m in models]
    reports = []
    with run.stage("cells"):
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_cell, m, cfg_doc, str(p), str(d)) for m, p, d in cells]
                outcomes = []
                for fut in futures:
                    try:
                        outcomes.append(fut.result())
                    except Exception as exc:  # noqa: BLE001 - reported per cell below
                        outcomes.append(exc)
        else:
            outcomes = []
            for m, p, d in cells:
                try:
                    outcomes.append(_run_cell(m, cfg_doc, str(p), str(d)))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append(exc)
    for (m, p, d), outcome in zip(cells, outcomes):
        if isinstance(outcome, Exception):
            if not keep_going:
                raise outcome
            run.failures.append({"model": m, "series": str(p), "error": f"{type(outcome).__name__}: {outcome}"})
            continue
        report, seconds = outcome
        run.stages[f"cell:{m}:{Path(p).stem}"] = round(seconds, 3)
        reports.append(report)
        for name in ("scores.csv", "scores.svg", "model.ckpt", "train_stats.csv"):
            if (d / name).exists():
                run.produced(d / name)

    # only datasets every model finished can be ranked
    done = {}
    for r in reports:
        done.setdefault(r.dataset, set()).add(r.model)
    complete = [r for r in reports if done[r.dataset] == set(models)]
    evaluation.write_reports_csv(reports, run.produced(run.out / "reports.csv"))
    if not complete:
        raise gan.TrainingError("no dataset finished for every model; nothing to rank")
    table = evaluation.build_rank_table(complete)
    evaluation.write_rank_csvs(table, run.produced(run.out / "rank_sums.csv"),
                               run.produced(run.out / "pairwise.csv"))
    plotting.plot_rank_sums(table, run.produced(run.out / "rank_f1.svg"), metric="f1")
    if "lstm_gan" in models:
        for other in models:
            if other != "lstm_gan":
                plotting.plot_pairwise(complete, "lstm_gan", other,
                                       run.produced(run.out / f"pairwise_lstm_gan_vs_{other}.svg"))


# --- argument handling ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file or a manifest.json from an earlier run")
    common.add_argument("--out", help="output directory (overrides config and environment)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--threshold", help="quantile:Q or bestf1")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")

    p = argparse.ArgumentParser(prog="tsgan", description="GAN-based anomaly detection for univariate time series")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic sine+spike fixtures")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--length", type=int, default=2000)
    sub.add_parser("train", parents=[common], help="train the GAN on every configured series")
    s = sub.add_parser("score", parents=[common], help="score windows with a trained checkpoint")
    s.add_argument("--checkpoint")
    s = sub.add_parser("eval", parents=[common], help="threshold scores and compute metrics")
    s.add_argument("--scores")
    s = sub.add_parser("benchmark", parents=[common], help="every model on every series, ranked")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--keep-going", action="store_true")
    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.add_argument("--out", help="output directory for the replay")
    return p


def _configure(ns) -> RunConfig:
    overrides = list(ns.overrides)
    if ns.seed is not None:
        overrides.append(f"run.seed={ns.seed}")
    if ns.threshold:
        overrides.append(f"run.threshold={ns.threshold}")
    cfg = load_config(ns.config, overrides)
    # absolute paths make the manifest replayable from any directory
    cfg.data.series = [str(Path(s).resolve()) for s in cfg.data.series]
    if cfg.data.labels:
        cfg.data.labels = str(Path(cfg.data.labels).resolve())
    if cfg.data.root:
        cfg.data.root = str(Path(cfg.data.root).resolve())
    return cfg


def _dispatch(run: Run, ns) -> None:
    if run.command == "synth":
        cmd_synth(run, ns.count, ns.length)
    elif run.command == "train":
        cmd_train(run)
    elif run.command == "score":
        cmd_score(run, ns.checkpoint)
    elif run.command == "eval":
        cmd_eval(run, ns.scores)
    elif run.command == "benchmark":
        cmd_benchmark(run, ns.jobs, ns.keep_going)


def _replay(ns) -> tuple[Run, argparse.Namespace]:
    path = Path(ns.manifest)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    cfg = RunConfig.from_dict(doc["config"])
    args = doc.get("args", {})
    out = resolve_out_dir(cfg, ns.out)
    rerun = argparse.Namespace(**args)
    return Run(doc["command"], cfg, out, args=args), rerun


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "replay":
            run, ns = _replay(ns)
        else:
            cfg = _configure(ns)
            extras = {k: getattr(ns, k) for k in ("count", "length", "checkpoint", "scores",
                                                   "jobs", "keep_going") if hasattr(ns, k)}
            for k in ("checkpoint", "scores"):
                if extras.get(k):
                    extras[k] = str(Path(extras[k]).resolve())
            run = Run(ns.command, cfg, resolve_out_dir(cfg, ns.out), args=extras)
            ns = argparse.Namespace(**extras)
        run.out.mkdir(parents=True, exist_ok=True)
        _dispatch(run, ns)
        run.write_manifest()
    except (ConfigError, ConfigurationError, data.DataError, UsageError, OSError, ValueError) as exc:
        print(f"tsgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (gan.TrainingError, inversion.InversionError, RuntimeError) as exc:
        print(f"tsgan: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if run.failures:
        for f in run.failures:
            print(f"tsgan: cell {f['model']} on {f['series']} failed: {f['error']}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
