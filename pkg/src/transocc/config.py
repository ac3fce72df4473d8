"""Experiment configuration files (YAML) and command-line overrides.

Example::

    dataset:
      manifest: data/manifest.csv      # or a `synthetic:` mapping
    transform_set: LM(5,2)             # preset name or path to a set file
    classifier: {architecture: small_conv}
    train: {learning_rate: 0.0002, batch_size: 128, epochs: 50}
    train_size: all
    runs: 3
    seed: 0
    output_dir: runs/lm52

Dataset and transform-set paths are resolved against the config file's
directory; ``output_dir`` against the working directory. Without
``output_dir`` results go to ``$TRANSOCC_OUTPUT_ROOT/<config name>``
(``./runs`` when the variable is unset).
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .classifier import TrainConfig
from .dataio import SyntheticConfig

OUTPUT_ROOT_ENV = "TRANSOCC_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    manifest: Path | None = None
    synthetic: SyntheticConfig | None = None
    target_dims: tuple | None = None
    transform_set: str = "LM(5,0)"
    classifier: dict = field(default_factory=lambda: {"architecture": "small_conv"})
    train: TrainConfig = field(default_factory=TrainConfig)
    train_size: int | str = "all"
    runs: int = 3
    seed: int = 0
    output_dir: Path = Path(DEFAULT_OUTPUT_ROOT) / "experiment"

    def validate(self, check_files: bool = True) -> "ExperimentConfig":
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("dataset needs exactly one of 'manifest' or 'synthetic'")
        if check_files and self.manifest is not None and not Path(self.manifest).exists():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if self.train_size != "all":
            try:
                self.train_size = int(self.train_size)
            except (TypeError, ValueError):
                raise ConfigError(f"train_size must be a count or 'all', got {self.train_size!r}") from None
            if self.train_size < 1:
                raise ConfigError("train_size must be >= 1")
        unknown = set(self.classifier) - {"architecture", "depth", "width_factor", "dropout"}
        if unknown:
            raise ConfigError(f"unknown classifier keys {sorted(unknown)}")
        return self

    def to_dict(self) -> dict:
        """Plain-data echo used in provenance records."""
        return {
            "dataset": {
                "manifest": str(self.manifest) if self.manifest else None,
                "synthetic": self.synthetic.to_dict() if self.synthetic else None,
                "target_dims": list(self.target_dims) if self.target_dims else None,
            },
            "transform_set": str(self.transform_set),
            "classifier": dict(self.classifier),
            "train": asdict(self.train),
            "train_size": self.train_size,
            "runs": self.runs,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
        }

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}': {exc}") from None


def from_dict(raw: dict, base_dir: Path | None = None, name: str = "experiment") -> ExperimentConfig:
    raw = dict(raw or {})
    base_dir = Path(base_dir) if base_dir else Path.cwd()
    known = {"dataset", "transform_set", "classifier", "train", "train_size", "runs", "seed", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    ds = raw.get("dataset") or {}
    if not isinstance(ds, dict):
        raise ConfigError("'dataset' must be a mapping")
    unknown = set(ds) - {"manifest", "synthetic", "target_dims"}
    if unknown:
        raise ConfigError(f"unknown keys in 'dataset': {sorted(unknown)}")
    cfg = ExperimentConfig()
    if ds.get("manifest") is not None:
        cfg.manifest = rel(ds["manifest"])
    if ds.get("synthetic") is not None:
        cfg.synthetic = _build(SyntheticConfig, ds["synthetic"], "dataset.synthetic")
    if ds.get("target_dims") is not None:
        cfg.target_dims = tuple(int(d) for d in ds["target_dims"])
    ts = raw.get("transform_set", cfg.transform_set)
    ts_path = rel(ts)
    cfg.transform_set = str(ts_path) if ts_path.suffix.lower() in (".yaml", ".yml", ".json") else str(ts)
    if raw.get("classifier") is not None:
        if not isinstance(raw["classifier"], dict):
            raise ConfigError("'classifier' must be a mapping")
        cfg.classifier = {"architecture": "small_conv", **raw["classifier"]}
    cfg.train = _build(TrainConfig, raw.get("train"), "train")
    cfg.train_size = raw.get("train_size", cfg.train_size)
    cfg.runs = int(raw.get("runs", cfg.runs))
    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.output_dir = Path(raw["output_dir"]) if raw.get("output_dir") else default_output_root() / name
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML config and apply ``key.sub=value`` overrides (values parsed as YAML)."""
    raw, base, name = {}, Path.cwd(), "experiment"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base, name = path.parent, path.stem
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return from_dict(raw, base, name)
