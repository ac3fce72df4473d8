"""Experiment driver: datasets, repeated runs, scoring and reports on disk.

Output layout of one experiment directory::

    dataset/                 synthetic data (only for synthetic configs)
    run_<k>/model.bin        trained classifier of run k (seed = base seed + k)
    run_<k>/loss.csv
    run_<k>/scores.csv       test-split scores
    run_<k>/roc.csv, pr.csv  curve points
    run_<k>/metrics.txt      per-run metrics
    metrics.txt              aggregate over runs
    provenance.txt           config echo, dataset hash, model hashes
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import ClassifierConfig, load_model, save_model, train, write_loss_log
from .config import ConfigError, ExperimentConfig
from .dataio import (DatasetManifest, SyntheticConfig, atomic_write_text, load_manifest, make_splits,
                     resolve_dims, synthesize)
from .evaluation import (METRICS, EvalReport, LabeledScores, aggregate_runs, evaluate_scores, pr_csv,
                         roc_csv)
from .scoring import score_batch, write_scores
from .transforms import TransformSet, resolve

logger = logging.getLogger(__name__)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(out_dir: Path, command: str, cfg: ExperimentConfig | None, **extra) -> None:
    record = {"command": command, "version": __version__}
    if cfg is not None:
        record["config"] = cfg.to_dict()
    record.update(extra)
    atomic_write_text(out_dir / "provenance.txt", json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def prepare_dataset(cfg: ExperimentConfig, out_dir: Path | None = None) -> DatasetManifest:
    """Load the configured manifest, or materialise the synthetic dataset once and reuse it."""
    if cfg.manifest is not None:
        return load_manifest(cfg.manifest, target_dims=cfg.target_dims)
    if cfg.synthetic is None:
        raise ConfigError("dataset needs a manifest or a synthetic config")
    data_dir = Path(out_dir or cfg.output_dir) / "dataset"
    stamp = data_dir / "synthetic_config.json"
    wanted = json.dumps(cfg.synthetic.to_dict(), sort_keys=True)
    if stamp.exists() and stamp.read_text() == wanted and (data_dir / "manifest.csv").exists():
        return load_manifest(data_dir / "manifest.csv", target_dims=cfg.target_dims)
    synthesize(cfg.synthetic, data_dir)
    atomic_write_text(stamp, wanted)
    return load_manifest(data_dir / "manifest.csv", target_dims=cfg.target_dims)


def resolve_transform_set(cfg: ExperimentConfig, manifest: DatasetManifest) -> TransformSet:
    return resolve(cfg.transform_set, image_size=resolve_dims(manifest)[0])


@dataclass
class SplitCache:
    """Loaded train/test batches keyed by (manifest hash, train size, seed)."""

    store: dict = field(default_factory=dict)

    def get(self, manifest: DatasetManifest, train_size, seed: int):
        pool = len(manifest.split("train"))
        size = pool if train_size in (None, "all") else int(train_size)
        # a full pool ignores the seed
        key = (manifest.content_hash, size, seed if size < pool else None)
        if key not in self.store:
            self.store[key] = make_splits(manifest, size, seed)
        return self.store[key]


def run_seed(cfg: ExperimentConfig, run_index: int) -> int:
    return cfg.seed + run_index


def train_runs(cfg: ExperimentConfig, manifest: DatasetManifest, out_dir: Path,
               cache: SplitCache | None = None) -> list[Path]:
    """Train ``cfg.runs`` models; returns the model file paths."""
    cache = cache or SplitCache()
    out_dir.mkdir(parents=True, exist_ok=True)
    tset = resolve_transform_set(cfg, manifest)
    dims = resolve_dims(manifest)
    paths, hashes = [], {}
    for k in range(cfg.runs):
        seed = run_seed(cfg, k)
        train_batch, _ = cache.get(manifest, cfg.train_size, seed)
        cc = ClassifierConfig(n_classes=tset.n, input_dims=dims, seed=seed, **cfg.classifier)
        logger.info("run %d/%d: training %s on %d images (seed %d)", k + 1, cfg.runs, tset.name,
                    len(train_batch), seed)
        model = train(train_batch, tset, cc, cfg.train,
                      progress=lambda ep, loss: logger.info("  epoch %d loss %.5f", ep, loss))
        run_dir = out_dir / f"run_{k}"
        path = run_dir / "model.bin"
        hashes[f"run_{k}"] = save_model(model, path)
        write_loss_log(model, run_dir / "loss.csv")
        paths.append(path)
    write_provenance(out_dir, "train", cfg, dataset_hash=manifest.content_hash,
                     transform_set=tset.describe(), model_hashes=hashes,
                     run_seeds=[run_seed(cfg, k) for k in range(cfg.runs)])
    return paths


def find_models(out_dir: Path) -> list[Path]:
    paths = sorted(Path(out_dir).glob("run_*/model.bin"), key=lambda p: int(p.parent.name.split("_")[1]))
    return paths


def evaluate_models(cfg: ExperimentConfig, manifest: DatasetManifest, model_paths, out_dir: Path,
                    cache: SplitCache | None = None) -> EvalReport:
    """Score the test split with every model and aggregate the per-run metrics."""
    cache = cache or SplitCache()
    model_paths = [Path(p) for p in model_paths]
    if not model_paths:
        raise ConfigError(f"no model files to evaluate (looked in {out_dir}/run_*/model.bin)")
    tset = resolve_transform_set(cfg, manifest)
    models = [load_model(p) for p in model_paths]
    for p, m in zip(model_paths, models):
        if m.n_classes != tset.n:
            raise ConfigError(f"{p}: model has {m.n_classes} classes but transform set {tset.name} has {tset.n}")
        if m.transform_set.describe()["transforms"] != tset.describe()["transforms"]:
            raise ConfigError(f"{p}: model was trained on transform set {m.transform_set.name}, config asks for {tset.name}")
    _, test = cache.get(manifest, "all", cfg.seed)
    if len(test) == 0:
        raise ConfigError("manifest has no test entries")

    run_metrics = []
    for k, model in enumerate(models):
        reports, failures = score_batch(model, test, tset)
        if failures:
            raise ValueError(f"{len(failures)} test samples could not be scored, e.g. {next(iter(failures.items()))}")
        run_dir = out_dir / f"run_{k}"
        write_scores(reports, run_dir / "scores.csv")
        ls = LabeledScores(np.array([r.score for r in reports]), np.array([r.is_majority for r in reports]))
        metrics = evaluate_scores(ls)
        run_metrics.append(metrics)
        atomic_write_text(run_dir / "roc.csv", roc_csv(ls))
        atomic_write_text(run_dir / "pr.csv", pr_csv(ls))
        atomic_write_text(run_dir / "metrics.txt", json.dumps({
            "model": str(model_paths[k]), "model_id": model.model_id,
            **{m: getattr(metrics, m) for m in METRICS},
        }, indent=2) + "\n")
        logger.info("run %d: AUC %.4f  AUPR-maj %.4f  AUPR-min %.4f", k, metrics.auc, metrics.aupr_maj,
                    metrics.aupr_min)
    report = aggregate_runs(run_metrics)
    write_metrics(report, out_dir / "metrics.txt", transform_set=tset.name)
    write_provenance(out_dir, "evaluate", cfg, dataset_hash=manifest.content_hash,
                     transform_set=tset.describe(),
                     model_hashes={str(p): file_sha256(p) for p in model_paths})
    return report


def write_metrics(report: EvalReport, path: Path, **extra) -> None:
    body = report.to_dict()
    body["percent"] = {m: report.formatted(m) for m in METRICS}
    body.update(extra)
    atomic_write_text(path, json.dumps(body, indent=2) + "\n")


def read_metrics(path: Path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    return EvalReport(per_run=d["per_run"], mean=d["mean"], std=d["std"], runs=d["runs"],
                      std_flavor=d.get("std_flavor", "population"))


def run_experiment(cfg: ExperimentConfig, manifest: DatasetManifest, out_dir: Path,
                   cache: SplitCache | None = None) -> EvalReport:
    cache = cache or SplitCache()
    paths = train_runs(cfg, manifest, out_dir, cache)
    return evaluate_models(cfg, manifest, paths, out_dir, cache)


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "set"


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _metric_cells(report: EvalReport) -> list:
    cells = []
    for m in METRICS:
        cells += [repr(report.mean[m]), repr(report.std[m])]
    return cells + [report.formatted("auc")]


METRIC_HEADER = ["auc", "auc_std", "aupr_maj", "aupr_maj_std", "aupr_min", "aupr_min_std", "auc_pct"]


def compare_transforms(cfg: ExperimentConfig, names, out_dir: Path) -> list[tuple[str, EvalReport]]:
    """Run the experiment once per transform set; table rows are sorted by mean AUC."""
    manifest = prepare_dataset(cfg, out_dir)
    size = resolve_dims(manifest)[0]
    sets = [resolve(n, image_size=size) for n in names]  # fail fast on unknown names
    cache = SplitCache()
    results = []
    for name, tset in zip(names, sets):
        sub = cfg.replace(transform_set=str(name))
        logger.info("== transform set %s ==", tset.name)
        results.append((tset, run_experiment(sub, manifest, out_dir / slug(tset.name), cache)))
    order = sorted(range(len(results)), key=lambda i: (-results[i][1].auc, i))
    rows = [[rank + 1, results[i][0].name, results[i][0].n, results[i][1].runs] + _metric_cells(results[i][1])
            for rank, i in enumerate(order)]
    atomic_write_text(out_dir / "comparison.csv", _table(["rank", "transform_set", "n", "runs"] + METRIC_HEADER, rows))
    write_provenance(out_dir, "compare-transforms", cfg, dataset_hash=manifest.content_hash,
                     transform_sets=[t.describe() for t, _ in results])
    return [(results[i][0].name, results[i][1]) for i in order]


def size_sweep(cfg: ExperimentConfig, sizes, out_dir: Path):
    """Run the experiment per training size; a failing size is recorded and skipped.

    Returns ``(rows, errors)`` where rows are ``(size, EvalReport)``.
    """
    manifest = prepare_dataset(cfg, out_dir)
    cache = SplitCache()
    rows, errors, table = [], {}, []
    for size in sizes:
        sub = cfg.replace(train_size=size)
        logger.info("== train size %s ==", size)
        try:
            report = run_experiment(sub, manifest, out_dir / f"size_{size}", cache)
        except ValueError as exc:
            logger.error("train size %s failed: %s", size, exc)
            errors[size] = str(exc)
            table.append([size, f"error: {exc}"] + [""] * len(METRIC_HEADER))
            continue
        rows.append((size, report))
        table.append([size, "ok"] + _metric_cells(report))
    atomic_write_text(out_dir / "size_sweep.csv", _table(["train_size", "status"] + METRIC_HEADER, table))
    write_provenance(out_dir, "size-sweep", cfg, dataset_hash=manifest.content_hash,
                     sizes=list(sizes), errors=errors)
    return rows, errors


def synth_command(config: SyntheticConfig, out_dir: Path) -> DatasetManifest:
    manifest = synthesize(config, out_dir)
    atomic_write_text(out_dir / "synthetic_config.json", json.dumps(config.to_dict(), sort_keys=True))
    write_provenance(out_dir, "synth", None, synthetic=config.to_dict(), dataset_hash=manifest.content_hash)
    return manifest
