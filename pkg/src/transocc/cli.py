"""Command-line interface.

Verbs: synth, preview-transforms, train, score, evaluate, compare-transforms,
size-sweep. Exit status is 0 when every requested output was written, 1 on a
partial failure, 2 on configuration or input errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import io
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import experiment as exp
from .classifier import ModelFileError, load_model
from .config import ConfigError, default_output_root, load_config
from .dataio import (ImageDecodeError, ManifestError, SampleBatch, SyntheticConfig, atomic_write_bytes, atomic_write_text,
                     generate_synthetic, load_image, load_manifest, preprocess, resolve_dims, parse_dims)
from .scoring import score_batch, write_scores
from .transforms import PRESET_NAMES, TransformError, expand, resolve

logger = logging.getLogger("transocc")

EXIT_OK, EXIT_PARTIAL, EXIT_ERROR = 0, 1, 2


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="experiment config file (YAML)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set train.epochs=10 (repeatable)")
    p.add_argument("--manifest", help="dataset manifest (overrides the config)")
    p.add_argument("--transform-set", help="preset name or transform set file")
    p.add_argument("--train-size", help="number of training images or 'all'")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--architecture", choices=["small_conv", "wide_residual"])
    p.add_argument("--output-dir", "-o")


def _config(args):
    cfg = load_config(args.config, args.overrides)
    if args.manifest:
        cfg.manifest, cfg.synthetic = Path(args.manifest), None
    if args.transform_set:
        cfg.transform_set = args.transform_set
    if args.train_size:
        cfg.train_size = args.train_size
    if args.runs is not None:
        cfg.runs = args.runs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.architecture:
        cfg.classifier["architecture"] = args.architecture
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if cfg.manifest is None and cfg.synthetic is None:
        cfg.synthetic = SyntheticConfig()
    return cfg.validate()


def cmd_synth(args) -> int:
    overrides = {}
    for key in ("n_majority", "n_minority", "n_train", "brightness_shift", "contrast_shift", "texture_seed"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.config:
        cfg = load_config(args.config, args.overrides)
        base = cfg.synthetic.to_dict() if cfg.synthetic else {}
        out = Path(args.output_dir) if args.output_dir else cfg.output_dir / "dataset"
    else:
        base = {}
        out = Path(args.output_dir) if args.output_dir else default_output_root() / "synthetic"
    if args.dims:
        overrides["dims"] = parse_dims(args.dims)
    config = SyntheticConfig(**{**base, **overrides})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        manifest = exp.synth_command(config, out)
    for w in caught:
        logger.warning("%s", w.message)
    print(f"wrote {len(manifest.entries)} images and {out / 'manifest.csv'} (sha256 {manifest.content_hash[:16]})")
    return EXIT_OK


def cmd_preview(args) -> int:
    if args.image:
        raw = load_image(args.image)
        dims = parse_dims(args.dims) if args.dims else (raw.shape[0], raw.shape[1], 1 if raw.ndim == 2 else min(raw.shape[2], 3))
        image = preprocess(raw, dims)
    elif args.manifest:
        manifest = load_manifest(args.manifest)
        dims = resolve_dims(manifest)
        image = preprocess(load_image(manifest.split("train")[0].path), dims)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            majority, _ = generate_synthetic(SyntheticConfig(n_majority=1, n_minority=1, n_train=1))
        image = majority[0]
    tset = resolve(args.transform_set, image_size=image.shape[0])
    out = Path(args.output_dir) if args.output_dir else default_output_root() / "preview"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "spec", "min", "mean", "max", "file"])
    for img, label in expand(image, tset):
        name = f"{exp.slug(tset.name)}_{label}.png"
        arr = np.round(img * 255).astype(np.uint8)
        png = io.BytesIO()
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(png, format="PNG")
        atomic_write_bytes(out / name, png.getvalue())
        spec = tset.specs[label - 1].describe()
        desc = " ".join(f"{k}={v}" for k, v in spec.items())
        w.writerow([label, desc, f"{img.min():.4f}", f"{img.mean():.4f}", f"{img.max():.4f}", name])
    atomic_write_text(out / "transforms.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = exp.prepare_dataset(cfg)
    paths = exp.train_runs(cfg, manifest, cfg.output_dir)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.manifest, target_dims=parse_dims(args.dims) if args.dims else None)
    tset = model.transform_set
    if args.transform_set:
        tset = resolve(args.transform_set, image_size=model.input_dims[0])
    entries = manifest.entries if args.split == "all" else manifest.split(args.split)
    dims = model.input_dims
    majority = manifest.majority_class
    images, ids, flags, failures = [], [], [], {}
    for e in entries:
        sid = manifest.sample_id(e)
        try:
            images.append(preprocess(load_image(e.path), dims))
        except ImageDecodeError as exc:
            failures[sid] = str(exc)
            continue
        ids.append(sid)
        flags.append(int(e.class_id == majority))
    batch = SampleBatch(np.stack(images) if images else np.empty((0,) + dims, np.float32), np.array(flags), ids)
    reports, more = score_batch(model, batch, tset)
    failures.update(more)
    out = Path(args.output) if args.output else Path(args.model).parent / "scores.csv"
    write_scores(reports, out)
    for sid, msg in failures.items():
        logger.error("could not score %s: %s", sid, msg)
    print(f"scored {len(reports)} samples -> {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    manifest = exp.prepare_dataset(cfg)
    models = [Path(m) for m in args.models] if args.models else exp.find_models(cfg.output_dir)
    report = exp.evaluate_models(cfg, manifest, models, cfg.output_dir)
    print(f"runs={report.runs}  AUC {report.formatted('auc')}  AUPR-maj {report.formatted('aupr_maj')}  "
          f"AUPR-min {report.formatted('aupr_min')}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    names = args.presets or list(PRESET_NAMES)
    for n in names:
        resolve(n, image_size=3)  # unknown names fail before any training
    results = exp.compare_transforms(cfg, names, cfg.output_dir)
    print((cfg.output_dir / "comparison.csv").read_text(), end="")
    return EXIT_OK if len(results) == len(names) else EXIT_PARTIAL


def cmd_size_sweep(args) -> int:
    cfg = _config(args)
    rows, errors = exp.size_sweep(cfg, args.sizes, cfg.output_dir)
    print((cfg.output_dir / "size_sweep.csv").read_text(), end="")
    return EXIT_PARTIAL if errors else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transocc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic majority/minority dataset")
    p.add_argument("--config", "-c")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--n-majority", type=int)
    p.add_argument("--n-minority", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--brightness-shift", type=float)
    p.add_argument("--contrast-shift", type=float)
    p.add_argument("--texture-seed", type=int)
    p.add_argument("--dims", help="HxWxC, e.g. 32x32x1")
    p.add_argument("--output-dir", "-o")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preview-transforms", help="write every transformed version of one image")
    p.add_argument("--transform-set", "-t", default="LM(5,0)")
    p.add_argument("--image", help="image file (default: a synthetic texture)")
    p.add_argument("--manifest", help="take the first training image of this manifest")
    p.add_argument("--dims", help="resize the image to HxWxC first")
    p.add_argument("--output-dir", "-o")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("train", help="train one model per run")
    _experiment_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score manifest images with a trained model")
    p.add_argument("--model", "-m", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--transform-set", help="must have as many transforms as the model has classes")
    p.add_argument("--dims", help="override the manifest's target dims")
    p.add_argument("--output", help="scores CSV path (default: next to the model)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="score the test split and report AUC / AUPR")
    _experiment_args(p)
    p.add_argument("--models", nargs="+", help="model files (default: <output_dir>/run_*/model.bin)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-transforms", help="train and evaluate one experiment per transform set")
    _experiment_args(p)
    p.add_argument("--presets", nargs="+", help=f"transform sets (default: {' '.join(PRESET_NAMES)})")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("size-sweep", help="train and evaluate at several training-set sizes")
    _experiment_args(p)
    p.add_argument("--sizes", nargs="+", type=int, required=True)
    p.set_defaults(func=cmd_size_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, TransformError, ModelFileError, ImageDecodeError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
