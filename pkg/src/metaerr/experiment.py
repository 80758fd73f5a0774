"""Config-driven experiment runs and reports.

A run directory looks like::

    <out>/manifest.json            config, config hash, versions, per-seed status
    <out>/aggregate.csv            rate x (method_mean, method_std) across seeds
    <out>/seed_<s>/adr.csv         one AdrTable per seed (rates x methods)
    <out>/seed_<s>/adr.json        the same table with run metadata
    <out>/seed_<s>/trace.json      SSL runs: per-round trace

Nothing in a run directory depends on wall-clock time, so rerunning a config
reproduces every file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derive_seed
from .adr import DEFAULT_RATES, AdrTable, adr_curve, aggregate_tables, oracle_score
from .data import (
    CsvSchema,
    Dataset,
    gen_gaussian_blobs,
    gen_regression_synthetic,
    gen_segmentation_synthetic,
    load_cache,
    load_csv,
    make_split,
)
from .metalabel import (
    build_meta_dataset,
    meta_labels_classification,
    meta_labels_regression,
    meta_labels_segmentation,
)
from .model import LayerSpec, TrainConfig, TrainingDivergedError, mc_predict, predict, train
from .scores import (
    ScoreVector,
    combine_average,
    score_bald,
    score_ddu,
    score_energy,
    score_entropy,
    score_mc_dropout,
    score_mc_regression,
    score_mc_segmentation,
    score_metaerr,
    score_random,
    score_sr,
)

CONFIG_VERSION = 1
KINDS = ("adr-classification", "adr-regression", "adr-segmentation", "ssl")
METHODS = {
    "adr-classification": (
        "random", "bald", "mc-dropout", "sr", "entropy", "energy", "ddu", "metaerr", "metaerr+sr",
        "oracle",
    ),
    "adr-regression": ("random", "mc-dropout", "metaerr", "oracle"),
    "adr-segmentation": ("random", "mc-dropout", "metaerr", "oracle"),
}
GENERATORS = {
    "gaussian_blobs": gen_gaussian_blobs,
    "regression": gen_regression_synthetic,
    "segmentation": gen_segmentation_synthetic,
}
WORKERS_ENV = "METAERR_WORKERS"


class ConfigError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    data: dict
    base_spec: LayerSpec
    base_train: TrainConfig
    meta_spec: LayerSpec | None = None
    meta_train: TrainConfig | None = None
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    methods: tuple[str, ...] = ()
    rates: tuple[float, ...] = DEFAULT_RATES
    seeds: tuple[int, ...] = (0,)
    mc_passes: int = 20
    energy_temperature: float = 1.0
    ddu_ridge: float = 1e-6
    ssl: dict = field(default_factory=dict)
    output_dir: str | None = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.kind != "ssl":
            if not self.methods:
                raise ConfigError("methods must be nonempty for adr experiments")
            unknown = set(self.methods) - set(METHODS[self.kind])
            if unknown:
                raise ConfigError(f"methods {sorted(unknown)} not available for {self.kind}")
            if self.meta_spec is None or self.meta_train is None:
                raise ConfigError("adr experiments need meta_spec and meta_train")
        if "csv" in self.data or "cache" in self.data:
            path = Path(self.data.get("csv") or self.data["cache"])
            if not path.is_file():
                raise ConfigError(f"data file not found: {path}")
        elif self.data.get("generator") not in GENERATORS:
            raise ConfigError(f"data needs 'csv', 'cache' or a generator in {sorted(GENERATORS)}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "kind": self.kind,
            "data": self.data,
            "split": list(self.split),
            "base_spec": self.base_spec.to_dict(),
            "base_train": self.base_train.to_dict(),
            "meta_spec": self.meta_spec.to_dict() if self.meta_spec else None,
            "meta_train": self.meta_train.to_dict() if self.meta_train else None,
            "methods": list(self.methods),
            "rates": list(self.rates),
            "seeds": list(self.seeds),
            "mc_passes": self.mc_passes,
            "energy_temperature": self.energy_temperature,
            "ddu_ridge": self.ddu_ridge,
            "ssl": self.ssl,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            return cls(
                version=d.pop("version", CONFIG_VERSION),
                kind=d.pop("kind"),
                data=d.pop("data"),
                split=tuple(d.pop("split", (0.6, 0.2, 0.2))),
                base_spec=LayerSpec.from_dict(d.pop("base_spec")),
                base_train=TrainConfig.from_dict(d.pop("base_train")),
                meta_spec=LayerSpec.from_dict(m) if (m := d.pop("meta_spec", None)) else None,
                meta_train=TrainConfig.from_dict(m) if (m := d.pop("meta_train", None)) else None,
                methods=tuple(d.pop("methods", ())),
                rates=tuple(d.pop("rates", DEFAULT_RATES)),
                seeds=tuple(d.pop("seeds", (0,))),
                **d,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_dataset(data: dict) -> Dataset:
    if "csv" in data:
        schema = data.get("schema") or {}
        schema = CsvSchema(
            features=tuple(schema["features"]),
            task=schema.get("task", "classification"),
            label=schema.get("label"),
            mask_columns=tuple(schema.get("mask_columns", ())),
            mask_shape=tuple(schema["mask_shape"]) if schema.get("mask_shape") else None,
            n_classes=schema.get("n_classes"),
            id_column=schema.get("id_column"),
        )
        return load_csv(data["csv"], schema)
    if "cache" in data:
        return load_cache(data["cache"])
    return GENERATORS[data["generator"]](**data.get("params", {}))


# -- one seed --------------------------------------------------------------------------


def _seeded(cfg: TrainConfig, seed: int, purpose: int) -> TrainConfig:
    return replace(cfg, seed=derive_seed(seed, purpose))


def _classification_scores(cfg, ds, split, base, meta, seed, test_x, pred, correct):
    available = {
        "random": lambda: score_random(len(test_x), derive_seed(seed, 30)),
        "sr": lambda: score_sr(pred.probs),
        "entropy": lambda: score_entropy(pred.probs),
        "energy": lambda: score_energy(pred.logits, cfg.energy_temperature),
        "ddu": lambda: score_ddu(
            test_x, ds.features[split.train_idx], ds.labels[split.train_idx], cfg.ddu_ridge
        ),
        "metaerr": lambda: score_metaerr(meta, test_x),
        "oracle": lambda: oracle_score(correct, "accuracy"),
    }
    if {"mc-dropout", "bald"} & set(cfg.methods):
        stack = mc_predict(base, test_x, cfg.mc_passes, derive_seed(seed, 31))
        available["mc-dropout"] = lambda: score_mc_dropout(stack)
        available["bald"] = lambda: score_bald(stack)
    available["metaerr+sr"] = lambda: combine_average(
        score_metaerr(meta, test_x), score_sr(pred.probs), method="metaerr+sr"
    )
    return [available[m]() for m in cfg.methods]


def run_adr_seed(cfg: ExperimentConfig, ds: Dataset, seed: int) -> AdrTable:
    """Train base and meta models for one seed and tabulate every requested method."""
    split = make_split(ds, cfg.split, seed)
    base = train(ds, split.train_idx, cfg.base_spec, _seeded(cfg.base_train, seed, 11))
    probe_x = ds.features[split.probe_idx]
    test_x = ds.features[split.test_idx]
    probe_pred = predict(base, probe_x)
    test_pred = predict(base, test_x)
    if cfg.kind == "adr-classification":
        meta_labels = meta_labels_classification(probe_pred.labels, ds.labels[split.probe_idx])
        per_sample = (test_pred.labels == ds.labels[split.test_idx]).astype(np.float64)
        metric, kind = "accuracy", "binary-correctness"
    elif cfg.kind == "adr-regression":
        meta_labels = meta_labels_regression(probe_pred.values, ds.labels[split.probe_idx])
        per_sample = (test_pred.values - ds.labels[split.test_idx]) ** 2
        metric, kind = "mse", "absolute-error"
    else:
        meta_labels = meta_labels_segmentation(probe_pred.labels, ds.labels[split.probe_idx])
        per_sample = meta_labels_segmentation(test_pred.labels, ds.labels[split.test_idx]).values
        metric, kind = "miou", "iou"
    meta_ds = build_meta_dataset(probe_x, meta_labels)
    meta = train(meta_ds, np.arange(len(meta_ds)), cfg.meta_spec, _seeded(cfg.meta_train, seed, 12))

    if cfg.kind == "adr-classification":
        scores = _classification_scores(cfg, ds, split, base, meta, seed, test_x, test_pred, per_sample)
    else:
        available = {
            "random": lambda: score_random(len(test_x), derive_seed(seed, 30)),
            "metaerr": lambda: score_metaerr(meta, test_x, kind),
            "oracle": lambda: oracle_score(per_sample, metric),
        }
        if "mc-dropout" in cfg.methods:
            stack = mc_predict(base, test_x, cfg.mc_passes, derive_seed(seed, 31))
            mc = score_mc_regression if cfg.kind == "adr-regression" else score_mc_segmentation
            available["mc-dropout"] = lambda: mc(stack)
        scores = [available[m]() for m in cfg.methods]

    table = adr_curve(scores, per_sample, cfg.rates, metric)
    meta_info = {
        "seed": seed,
        "n_train": len(split.train_idx),
        "n_probe": len(split.probe_idx),
        "probe_base_metric": float(np.mean(meta_labels.values)),
        "test_base_metric": math.fsum(per_sample) / len(per_sample),
        "config_sha256": cfg.digest(),
    }
    return AdrTable(table.rates, table.methods, table.values, metric, table.n_test, meta_info)


def _run_seed(args) -> dict:
    cfg, ds, seed, out = args
    seed_dir = Path(out) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.kind == "ssl":
            from .ssl import SslConfig, run_ssl

            result = run_ssl(ds, cfg.ssl.get("labeled_frac", 0.1), SslConfig.from_experiment(cfg, seed))
            (seed_dir / "trace.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
            return {"seed": seed, "status": "ok", "top1": result.final_top1, "top5": result.final_top5}
        table = run_adr_seed(cfg, ds, seed)
    except TrainingDivergedError as exc:
        return {"seed": seed, "status": "diverged", "error": str(exc), "epoch": exc.epoch}
    table.to_csv(seed_dir / "adr.csv")
    table.to_json(seed_dir / "adr.json")
    return {"seed": seed, "status": "ok", "test_base_metric": table.meta["test_base_metric"]}


def _write_aggregate(cfg: ExperimentConfig, out: Path, seeds: list[int]) -> None:
    tables = [AdrTable.from_csv(out / f"seed_{s}" / "adr.csv", "", 0) for s in seeds]
    if not tables:
        return
    mean, std = aggregate_tables(tables)
    with (out / "aggregate.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        methods = tables[0].methods
        writer.writerow(["rate", *(f"{m}_{stat}" for m in methods for stat in ("mean", "std"))])
        for j, r in enumerate(tables[0].rates):
            cells = []
            for i in range(len(methods)):
                cells += [repr(float(mean[i, j])), repr(float(std[i, j]))]
            writer.writerow([repr(float(r)), *cells])


def run_experiment(cfg: ExperimentConfig, out=None) -> dict:
    """Run every seed of ``cfg`` into ``out`` and return the manifest.

    A seed whose training diverges is recorded in the manifest and skipped;
    the other seeds still run. ``METAERR_WORKERS`` > 1 runs seeds in worker
    processes.
    """
    out = Path(out or cfg.output_dir or "runs")
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.data)
    jobs = [(cfg, ds, s, str(out)) for s in cfg.seeds]
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    ok = [r["seed"] for r in results if r["status"] == "ok"]
    if cfg.kind != "ssl":
        _write_aggregate(cfg, out, ok)
    else:
        _write_ssl_summary(out, results)
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "versions": {"metaerr": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "seeds": results,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_ssl_summary(out: Path, results: list[dict]) -> None:
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "status", "top1", "top5"])
        for r in results:
            writer.writerow([r["seed"], r["status"], repr(float(r.get("top1", "nan"))),
                             repr(float(r.get("top5", "nan")))])


# -- reports ----------------------------------------------------------------------------


def emit_report(run_dir) -> str:
    """Summarise every run under ``run_dir`` into ``report.txt`` plus plot series.

    Runs are directories containing a ``manifest.json`` (``run_dir`` itself or
    its immediate children). For ADR runs, ``series/<method>.csv`` holds
    ``rate, mean, std`` recomputed from the per-seed tables.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"no runs found: {run_dir} is not a directory")
    candidates = [run_dir] + sorted(p for p in run_dir.iterdir() if p.is_dir())
    runs = [p for p in candidates if (p / "manifest.json").is_file()]
    if not runs:
        raise ReportError(f"no runs found in {run_dir}")
    sections = []
    for run in runs:
        try:
            manifest = json.loads((run / "manifest.json").read_text())
            cfg = manifest["config"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ReportError(f"corrupt manifest in {run}: {exc}") from None
        ok = [r["seed"] for r in manifest["seeds"] if r["status"] == "ok"]
        failed = [r for r in manifest["seeds"] if r["status"] != "ok"]
        lines = [f"run: {run.name}", f"kind: {cfg['kind']}", f"seeds ok: {ok}"]
        lines += [f"seed {r['seed']} {r['status']}: {r.get('error', '')}" for r in failed]
        if cfg["kind"] == "ssl":
            top1 = [r["top1"] for r in manifest["seeds"] if r["status"] == "ok"]
            top5 = [r["top5"] for r in manifest["seeds"] if r["status"] == "ok"]
            for name, vals in (("top1", top1), ("top5", top5)):
                if vals:
                    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                    lines.append(f"{name}: {np.mean(vals):.4f} +- {sd:.4f}")
        elif ok:
            try:
                tables = [AdrTable.from_csv(run / f"seed_{s}" / "adr.csv", "", 0) for s in ok]
            except (OSError, ValueError, IndexError) as exc:
                raise ReportError(f"corrupt table in {run}: {exc}") from None
            mean, std = aggregate_tables(tables)
            methods, rates = tables[0].methods, tables[0].rates
            series = run / "series"
            series.mkdir(exist_ok=True)
            for i, m in enumerate(methods):
                with (series / f"{m}.csv").open("w", newline="") as fh:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(["rate", "mean", "std"])
                    for j, r in enumerate(rates):
                        writer.writerow([repr(float(r)), repr(float(mean[i, j])), repr(float(std[i, j]))])
            width = max(18, *(len(m) + 2 for m in methods))
            lines.append("DR".ljust(6) + "".join(m.rjust(width) for m in methods))
            for j, r in enumerate(rates):
                cells = "".join(f"{mean[i, j]:.4f}+-{std[i, j]:.4f}".rjust(width) for i in range(len(methods)))
                lines.append(f"{r:<6.2f}{cells}")
        sections.append("\n".join(lines))
    text = "\n\n".join(sections) + "\n"
    (run_dir / "report.txt").write_text(text)
    return text
