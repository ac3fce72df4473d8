"""Dataset manifests, image preprocessing, train/test splits and synthetic data.

Manifest format (comma-delimited, header required)::

    # target_dims: 128,128,1
    path,class_id,split
    images/0001.png,B,train
    images/0002.png,other,test

The optional comment line fixes the preprocessing target. Relative paths are
resolved against the manifest's directory. The train split must hold a single
class_id; that class is the majority class.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

LUMINANCE_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ManifestError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    class_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    target_dims: tuple[int, int, int] | None = None
    source: Path | None = None
    content_hash: str = ""

    def __post_init__(self):
        if not self.entries:
            raise ManifestError("manifest has no entries")
        train_classes = {e.class_id for e in self.entries if e.split == "train"}
        if len(train_classes) > 1:
            raise ManifestError(
                f"train split must contain exactly one class_id, found {sorted(train_classes)}"
            )
        if not train_classes:
            raise ManifestError("manifest has no train entries")
        if self.target_dims is not None:
            self.target_dims = _check_dims(self.target_dims)

    @property
    def majority_class(self) -> str:
        return next(e.class_id for e in self.entries if e.split == "train")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def sample_id(self, entry: ManifestEntry) -> str:
        if self.source is not None:
            try:
                return entry.path.relative_to(self.source.parent).as_posix()
            except ValueError:
                pass
        return entry.path.as_posix()


@dataclass
class SampleBatch:
    """Images stacked as ``(N, H, W, C)`` float32 with parallel labels and ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError(
                f"batch lengths differ: {len(self.images)} images, {len(self.labels)} labels, {len(self.ids)} ids"
            )
        if self.images.ndim != 4 and len(self.images):
            raise ValueError(f"images must be stacked as (N, H, W, C), got shape {self.images.shape}")

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "SampleBatch":
        index = np.asarray(index, dtype=int)
        return SampleBatch(self.images[index], self.labels[index], [self.ids[i] for i in index])

    @classmethod
    def concatenate(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        return cls(
            np.concatenate([b.images for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [i for b in batches for i in b.ids],
        )


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ManifestError(f"target_dims must be three positive integers (H, W, C), got {dims}")
    if dims[2] not in (1, 3):
        raise ManifestError(f"channel count must be 1 or 3, got {dims[2]}")
    return dims


def parse_dims(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").replace("X", ",").split(",") if p.strip()]
    try:
        return _check_dims([int(p) for p in parts])
    except ValueError as exc:
        raise ManifestError(f"bad dimension string {text!r}: {exc}") from None


def load_manifest(path: str | Path, target_dims=None, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    ``target_dims`` overrides the ``# target_dims:`` comment in the file.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    dims_from_file = None
    header_seen = False
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.lower().startswith("target_dims:"):
                dims_from_file = parse_dims(body.split(":", 1)[1])
            continue
        row = next(csv.reader([line]))
        row = [c.strip() for c in row]
        if not header_seen:
            if row != ["path", "class_id", "split"]:
                raise ManifestError(f"{path}:{lineno}: expected header 'path,class_id,split', got {line!r}")
            header_seen = True
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        rel, class_id, split = row
        if split not in ("train", "test"):
            raise ManifestError(f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
        if not rel or not class_id:
            raise ManifestError(f"{path}:{lineno}: empty path or class_id")
        img_path = Path(rel)
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        if check_files and not img_path.exists():
            raise ManifestError(f"{path}:{lineno}: image file not found: {img_path}")
        entries.append(ManifestEntry(img_path, class_id, split))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    dims = target_dims if target_dims is not None else dims_from_file
    return DatasetManifest(
        entries, target_dims=dims, source=path, content_hash=hashlib.sha256(raw).hexdigest()
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> str:
    """Write ``manifest`` with paths relative to the file's directory; returns the content hash."""
    path = Path(path)
    buf = io.StringIO()
    if manifest.target_dims is not None:
        buf.write("# target_dims: {},{},{}\n".format(*manifest.target_dims))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "class_id", "split"])
    for e in manifest.entries:
        try:
            rel = e.path.relative_to(path.parent)
        except ValueError:
            rel = e.path
        writer.writerow([rel.as_posix(), e.class_id, e.split])
    data = buf.getvalue().encode()
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# -- decoding and preprocessing -------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Decode a raster file (or ``.npy``) into a numpy array, keeping its dtype."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            return np.load(path, allow_pickle=False)
        except (ValueError, OSError) as exc:
            raise ImageDecodeError(f"cannot decode {path}: {exc}") from None
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            elif im.mode == "CMYK":
                im = im.convert("RGB")
            arr = np.asarray(im)
            if im.mode == "I" and arr.size and arr.min() >= 0 and arr.max() <= 65535:
                # 16-bit sources sometimes decode as 32-bit "I"
                arr = arr.astype(np.uint16)
            return arr
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from None


def _to_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == bool:
        return arr.astype(np.float32)
    if np.issubdtype(arr.dtype, np.integer):
        return (arr.astype(np.float64) / np.iinfo(arr.dtype).max).astype(np.float32)
    if np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all():
            raise ImageDecodeError("image contains non-finite values")
        if arr.min() < 0 or arr.max() > 1:
            raise ImageDecodeError("floating-point images must already lie in [0, 1]")
        return arr.astype(np.float32)
    raise ImageDecodeError(f"unsupported pixel dtype {arr.dtype}")


def _match_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[2] in (2, 4):
        img = img[:, :, :-1]  # drop alpha
    have = img.shape[2]
    if have == channels:
        return img
    if have == 1 and channels == 3:
        return np.repeat(img, 3, axis=2)
    if have == 3 and channels == 1:
        lum = img.astype(np.float64) @ LUMINANCE_WEIGHTS
        return lum[:, :, None].astype(np.float32)
    raise ImageDecodeError(f"cannot convert {have} channels to {channels}")


def _resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    planes = [
        np.asarray(Image.fromarray(np.ascontiguousarray(img[:, :, k], dtype=np.float32)).resize((width, height), Image.BILINEAR))
        for k in range(img.shape[2])
    ]
    return np.stack(planes, axis=2).astype(np.float32)


def preprocess(raw_image, target_dims) -> np.ndarray:
    """Convert a decoded image to a float32 ``(H, W, C)`` array in [0, 1].

    Integer inputs are divided by their dtype's maximum. Gray inputs are
    replicated to three channels, colour inputs reduced to luminance, and the
    result is resized with bilinear interpolation (aspect ratio not kept).
    """
    h, w, c = _check_dims(target_dims)
    if isinstance(raw_image, Image.Image):
        raw_image = np.asarray(raw_image)
    arr = np.asarray(raw_image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageDecodeError(f"expected a 2-D or 3-D image array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageDecodeError("zero-area image")
    img = _match_channels(_to_unit_float(arr), c)
    if img.shape[:2] != (h, w):
        img = _resize_bilinear(np.ascontiguousarray(img, dtype=np.float32), h, w)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


def load_entries(entries: Sequence[ManifestEntry], target_dims) -> np.ndarray:
    dims = _check_dims(target_dims)
    out = np.empty((len(entries),) + dims, dtype=np.float32)
    for i, e in enumerate(entries):
        out[i] = preprocess(load_image(e.path), dims)
    return out


def resolve_dims(manifest: DatasetManifest) -> tuple[int, int, int]:
    """Target dims from the manifest, else the first train image's own shape."""
    if manifest.target_dims is not None:
        return manifest.target_dims
    first = load_image(manifest.split("train")[0].path)
    h, w = first.shape[:2]
    c = 1 if first.ndim == 2 or first.shape[2] in (1, 2) else 3
    return (h, w, c)


def make_splits(manifest: DatasetManifest, train_size: int | str | None = None, seed: int = 0):
    """Build the majority-only training batch and the labelled test batch.

    ``train_size`` of ``None`` or ``"all"`` takes the whole train pool. Otherwise
    that many train entries are drawn uniformly without replacement; the drawn
    entries keep manifest order. Train labels are all 1 (majority); test labels
    are 1 for majority and 0 for minority.
    """
    pool = manifest.split("train")
    test = manifest.split("test")
    if train_size is None or train_size == "all":
        train_size = len(pool)
    train_size = int(train_size)
    if train_size < 1:
        raise ValueError(f"train_size must be >= 1, got {train_size}")
    if train_size > len(pool):
        raise ValueError(f"train_size {train_size} exceeds the {len(pool)} available train entries")
    if train_size == len(pool):
        chosen = list(range(len(pool)))
    else:
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(pool), size=train_size, replace=False).tolist())
    dims = resolve_dims(manifest)
    train_entries = [pool[i] for i in chosen]
    majority = manifest.majority_class
    train = SampleBatch(
        load_entries(train_entries, dims),
        np.ones(len(train_entries), dtype=int),
        [manifest.sample_id(e) for e in train_entries],
    )
    test_batch = SampleBatch(
        load_entries(test, dims) if test else np.empty((0,) + dims, dtype=np.float32),
        np.array([int(e.class_id == majority) for e in test], dtype=int),
        [manifest.sample_id(e) for e in test],
    )
    return train, test_batch


# -- synthetic data -----------------------------------------------------------------

TEXTURE_LOW, TEXTURE_HIGH = 0.2, 0.7
TEXTURE_CENTER = 0.5 * (TEXTURE_LOW + TEXTURE_HIGH)


@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for a majority/minority image dataset.

    Majority images are Gaussian-smoothed noise fields rescaled to [0.2, 0.7].
    Minority images are drawn from the same family, then mapped through
    ``0.45 + contrast_shift * (x - 0.45) + brightness_shift`` and clipped, so
    the brightness shift moves the mean by about ``brightness_shift``.
    The first ``n_train`` majority images form the train split.
    """

    n_majority: int = 2022
    n_minority: int = 978
    n_train: int = 1500
    dims: tuple = (32, 32, 1)
    brightness_shift: float = 0.2
    contrast_shift: float = 1.2
    texture_seed: int = 0
    smoothness: float = 2.0

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        if self.n_majority < 1 or self.n_minority < 1:
            raise ValueError("n_majority and n_minority must be >= 1")
        if not 1 <= self.n_train <= self.n_majority:
            raise ValueError(f"n_train must lie in [1, n_majority={self.n_majority}], got {self.n_train}")
        if self.contrast_shift <= 0:
            raise ValueError("contrast_shift must be > 0")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be > 0")

    @property
    def signal_free(self) -> bool:
        return self.brightness_shift == 0 and self.contrast_shift == 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def _textures(rng: np.random.Generator, count: int, dims, sigma: float) -> np.ndarray:
    h, w, c = dims
    out = np.empty((count, h, w, c), dtype=np.float32)
    for i in range(count):
        for k in range(c):
            z = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
            span = z.max() - z.min()
            z = (z - z.min()) / span if span > 0 else np.zeros_like(z)
            out[i, :, :, k] = TEXTURE_LOW + (TEXTURE_HIGH - TEXTURE_LOW) * z
    return out


def minority_map(x: np.ndarray, config: SyntheticConfig, clip: bool = True) -> np.ndarray:
    y = TEXTURE_CENTER + config.contrast_shift * (x - TEXTURE_CENTER) + config.brightness_shift
    return np.clip(y, 0.0, 1.0) if clip else y


def generate_synthetic(config: SyntheticConfig):
    """Return ``(majority, minority)`` float32 stacks, deterministic in ``texture_seed``."""
    rng = np.random.default_rng(config.texture_seed)
    majority = _textures(rng, config.n_majority, config.dims, config.smoothness)
    base = _textures(rng, config.n_minority, config.dims, config.smoothness)
    raw = minority_map(base, config, clip=False)
    clipped = float(np.mean((raw < 0) | (raw > 1)))
    if clipped > 0.5:
        warnings.warn(
            f"synthetic minority shifts clip {clipped:.0%} of pixels; class signal is largely destroyed",
            RuntimeWarning,
            stacklevel=2,
        )
    if config.signal_free:
        warnings.warn("signal-free dataset: minority and majority share one distribution", RuntimeWarning, stacklevel=2)
    minority = np.clip(raw, 0.0, 1.0).astype(np.float32)
    return majority, minority


def _encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    if img.shape[2] == 1:
        arr = np.round(img[:, :, 0] * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(buf, format="PNG")
    else:
        arr = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def synthesize(config: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    """Materialise a synthetic dataset as PNG files plus ``manifest.csv``.

    Gray images are stored as 16-bit PNG, colour images as 8-bit PNG.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    majority, minority = generate_synthetic(config)
    entries = []
    for i, img in enumerate(majority):
        p = img_dir / f"majority_{i:05d}.png"
        atomic_write_bytes(p, _encode_png(img))
        entries.append(ManifestEntry(p, "majority", "train" if i < config.n_train else "test"))
    for i, img in enumerate(minority):
        p = img_dir / f"minority_{i:05d}.png"
        atomic_write_bytes(p, _encode_png(img))
        entries.append(ManifestEntry(p, "minority", "test"))
    manifest = DatasetManifest(entries, target_dims=config.dims, source=out_dir / "manifest.csv")
    manifest.content_hash = write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("wrote %d majority / %d minority images to %s", len(majority), len(minority), out_dir)
    return manifest


def synthetic_splits(config: SyntheticConfig):
    """In-memory equivalent of ``synthesize`` + ``make_splits`` (no PNG quantisation)."""
    majority, minority = generate_synthetic(config)
    n = config.n_train
    train = SampleBatch(majority[:n], np.ones(n, dtype=int), [f"majority_{i:05d}" for i in range(n)])
    test_imgs = np.concatenate([majority[n:], minority])
    labels = np.r_[np.ones(len(majority) - n, dtype=int), np.zeros(len(minority), dtype=int)]
    ids = [f"majority_{i:05d}" for i in range(n, len(majority))] + [f"minority_{i:05d}" for i in range(len(minority))]
    return train, SampleBatch(test_imgs, labels, ids)
