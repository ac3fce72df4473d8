"""Intensity and geometric transformation sets.

A transformation set is an ordered list of specs. The spec at position ``i``
(0-based) carries the class label ``i + 1``; exactly one spec is the identity.
Linear magnification maps every pixel ``p`` to ``clip(c * p + b, 0, 1)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import yaml


class TransformError(ValueError):
    """Raised for invalid transform specs, sets, or inputs."""


@dataclass(frozen=True)
class LinearMagnificationSpec:
    c: float
    b: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.c) or not np.isfinite(self.b):
            raise TransformError(f"non-finite coefficient in {self!r}")
        if self.c <= 0:
            raise TransformError(f"contrast coefficient must be > 0, got c={self.c}")

    @property
    def is_identity(self) -> bool:
        return self.c == 1 and self.b == 0

    def describe(self) -> dict:
        return {"kind": "linear", "c": float(self.c), "b": float(self.b)}


@dataclass(frozen=True)
class GeometricSpec:
    kind: str
    dx: int = 0
    dy: int = 0
    angle: int = 0

    def __post_init__(self):
        if self.kind == "shift":
            if self.angle:
                raise TransformError("shift spec cannot carry an angle")
            if int(self.dx) != self.dx or int(self.dy) != self.dy:
                raise TransformError(f"shift must be whole pixels, got ({self.dx}, {self.dy})")
        elif self.kind == "rotation":
            if self.dx or self.dy:
                raise TransformError("rotation spec cannot carry a shift")
            if self.angle not in (0, 90, 180, 270):
                raise TransformError(f"rotation angle must be one of 0/90/180/270, got {self.angle}")
        else:
            raise TransformError(f"unknown geometric kind {self.kind!r}")

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.angle == 0

    def describe(self) -> dict:
        if self.kind == "shift":
            return {"kind": "shift", "dx": int(self.dx), "dy": int(self.dy)}
        return {"kind": "rotation", "angle": int(self.angle)}


Spec = Union[LinearMagnificationSpec, GeometricSpec]


@dataclass(frozen=True)
class TransformSet:
    """Ordered transformation family; ``specs[i]`` has class label ``i + 1``."""

    name: str
    specs: tuple

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        if len(specs) < 2:
            raise TransformError(f"transform set {self.name!r} needs at least 2 specs, got {len(specs)}")
        linear = [isinstance(s, LinearMagnificationSpec) for s in specs]
        if not (all(linear) or not any(linear)):
            raise TransformError(f"transform set {self.name!r} mixes linear and geometric specs")
        if not all(isinstance(s, (LinearMagnificationSpec, GeometricSpec)) for s in specs):
            raise TransformError("specs must be LinearMagnificationSpec or GeometricSpec")
        n_identity = sum(s.is_identity for s in specs)
        if n_identity != 1:
            raise TransformError(
                f"transform set {self.name!r} must contain exactly one identity, found {n_identity}"
            )

    @property
    def n(self) -> int:
        return len(self.specs)

    @property
    def identity_index(self) -> int:
        return next(i for i, s in enumerate(self.specs) if s.is_identity)

    @property
    def labels(self) -> list[int]:
        return list(range(1, self.n + 1))

    def describe(self) -> dict:
        return {"name": self.name, "transforms": [s.describe() for s in self.specs]}

    @classmethod
    def from_description(cls, desc: dict) -> "TransformSet":
        try:
            name = str(desc["name"])
            items = desc["transforms"]
        except (KeyError, TypeError) as exc:
            raise TransformError(f"transform set description needs 'name' and 'transforms': {exc}") from None
        return cls(name, tuple(_spec_from_dict(item, i) for i, item in enumerate(items)))


def _spec_from_dict(item: dict, index: int) -> Spec:
    if not isinstance(item, dict) or "kind" not in item:
        raise TransformError(f"transform #{index + 1}: expected a mapping with a 'kind' key")
    kind = item["kind"]
    unknown = set(item) - {"kind", "c", "b", "dx", "dy", "angle"}
    if unknown:
        raise TransformError(f"transform #{index + 1}: unknown keys {sorted(unknown)}")
    try:
        if kind == "linear":
            return LinearMagnificationSpec(float(item["c"]), float(item.get("b", 0.0)))
        if kind == "shift":
            return GeometricSpec("shift", dx=int(item.get("dx", 0)), dy=int(item.get("dy", 0)))
        if kind == "rotation":
            return GeometricSpec("rotation", angle=int(item["angle"]))
    except KeyError as exc:
        raise TransformError(f"transform #{index + 1}: missing field {exc}") from None
    except TransformError as exc:
        raise TransformError(f"transform #{index + 1}: {exc}") from None
    raise TransformError(f"transform #{index + 1}: unknown kind {kind!r}")


def _check_pixels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim < 3:
        raise TransformError(f"expected an (H, W, C) image or (N, H, W, C) batch, got shape {image.shape}")
    if not np.issubdtype(image.dtype, np.floating):
        raise TransformError(f"expected floating-point intensities, got dtype {image.dtype}")
    if not np.isfinite(image).all():
        raise TransformError("image contains non-finite pixel values")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise TransformError("image intensities must lie in [0, 1]")
    return image


def apply_linear(image: np.ndarray, spec: LinearMagnificationSpec) -> np.ndarray:
    """Return ``clip(c * image + b, 0, 1)``; the same coefficients hit every channel.

    Works on a single ``(H, W, C)`` image or an ``(N, H, W, C)`` batch and keeps
    the input dtype. The identity spec returns an exact copy.
    """
    image = _check_pixels(image)
    if spec.c <= 0:
        raise TransformError(f"contrast coefficient must be > 0, got c={spec.c}")
    if spec.is_identity:
        return image.copy()
    out = spec.c * image + spec.b
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(image.dtype, copy=False)


def apply_geometric(image: np.ndarray, spec: GeometricSpec) -> np.ndarray:
    """Rotate counter-clockwise by a right angle, or translate with zero fill.

    Positive ``dx`` moves content towards higher column indices, positive
    ``dy`` towards higher row indices. Spatial axes are the two before the
    trailing channel axis.
    """
    image = _check_pixels(image)
    h, w = image.shape[-3], image.shape[-2]
    if spec.kind == "rotation":
        if spec.angle not in (0, 90, 180, 270):
            raise TransformError(f"rotation angle must be one of 0/90/180/270, got {spec.angle}")
        if spec.angle == 0:
            return image.copy()
        if h != w:
            raise TransformError(f"rotation needs a square image, got {h}x{w}")
        return np.ascontiguousarray(np.rot90(image, k=spec.angle // 90, axes=(-3, -2)))

    dx, dy = int(spec.dx), int(spec.dy)
    if abs(dx) >= w or abs(dy) >= h:
        raise TransformError(f"shift ({dx}, {dy}) out of range for a {h}x{w} image")
    out = np.zeros_like(image)
    src_rows = slice(max(0, -dy), h - max(0, dy))
    dst_rows = slice(max(0, dy), h - max(0, -dy))
    src_cols = slice(max(0, -dx), w - max(0, dx))
    dst_cols = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_rows, dst_cols, :] = image[..., src_rows, src_cols, :]
    return out


def apply(image: np.ndarray, spec: Spec) -> np.ndarray:
    if isinstance(spec, LinearMagnificationSpec):
        return apply_linear(image, spec)
    if isinstance(spec, GeometricSpec):
        return apply_geometric(image, spec)
    raise TransformError(f"unsupported spec type {type(spec).__name__}")


def expand(image: np.ndarray, transform_set: TransformSet) -> list[tuple[np.ndarray, int]]:
    """Generate the ``n`` transformed counterparts of ``image`` with 1-based labels."""
    pairs = []
    for i, spec in enumerate(transform_set.specs):
        try:
            pairs.append((apply(image, spec), i + 1))
        except TransformError as exc:
            raise TransformError(f"transform #{i + 1} of {transform_set.name!r} failed: {exc}") from exc
    return pairs


def _linear_set(name: str, c: Sequence[float], b: Sequence[float]) -> TransformSet:
    if len(c) != len(b):
        raise TransformError(f"{name}: {len(c)} contrast values but {len(b)} brightness values")
    return TransformSet(name, tuple(LinearMagnificationSpec(ci, bi) for ci, bi in zip(c, b)))


_LINEAR_PRESETS = {
    "LM(5,0)": ([0.2, 0.6, 1.0, 1.4, 1.8], [0.0, 0.0, 0.0, 0.0, 0.0]),
    "LM(5,1)": ([0.6, 0.8, 1.0, 1.2, 1.4], [0.2, -0.2, 0.0, 0.2, -0.2]),
    "LM(5,2)": ([0.6, 0.8, 1.0, 1.2, 1.4], [0.4, -0.4, 0.0, 0.4, -0.4]),
    # printed with a nonzero brightness vector despite the name; kept as printed
    "LM(3,0)": ([0.8, 1.0, 1.2], [-0.2, 0.0, 0.2]),
    # only five brightness values are published for seven contrasts; zeros here,
    # override through a custom set file
    "LM(7,0)": ([0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6], [0.0] * 7),
}

PRESET_NAMES = ("LM(5,0)", "S(4,0)", "R(4,0)", "LM(5,1)", "LM(5,2)", "LM(3,0)", "LM(7,0)")

_PRESET_KEY = re.compile(r"\s+")


def preset(name: str, image_size: int | None = None) -> TransformSet:
    """Return a named transformation set.

    ``S(4,0)`` depends on the image side ``h`` (shifts of ``h // 3`` pixels),
    so ``image_size`` is required for it and ignored otherwise.
    """
    key = _PRESET_KEY.sub("", str(name)).upper()
    if key in _LINEAR_PRESETS:
        c, b = _LINEAR_PRESETS[key]
        return _linear_set(key, c, b)
    if key == "R(4,0)":
        return TransformSet(key, tuple(GeometricSpec("rotation", angle=a) for a in (0, 90, 180, 270)))
    if key == "S(4,0)":
        if image_size is None:
            raise TransformError("S(4,0) needs the image side length (image_size)")
        step = int(image_size) // 3
        if step < 1:
            raise TransformError(f"S(4,0) needs images of side >= 3, got {image_size}")
        shifts = [(0, 0), (step, 0), (0, step), (step, step)]
        return TransformSet(key, tuple(GeometricSpec("shift", dx=dx, dy=dy) for dx, dy in shifts))
    raise TransformError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")


def load_transform_set(path: str | Path) -> TransformSet:
    path = Path(path)
    if not path.exists():
        raise TransformError(f"transform set file not found: {path}")
    try:
        desc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise TransformError(f"cannot parse transform set file {path}: {exc}") from None
    return TransformSet.from_description(desc)


def save_transform_set(transform_set: TransformSet, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(transform_set.describe(), sort_keys=False))


def resolve(name_or_path: str | TransformSet, image_size: int | None = None) -> TransformSet:
    """Accept a preset name, a path to a set file, or an existing set."""
    if isinstance(name_or_path, TransformSet):
        return name_or_path
    path = Path(str(name_or_path))
    if path.suffix.lower() in (".yaml", ".yml", ".json") or path.exists():
        return load_transform_set(path)
    return preset(str(name_or_path), image_size=image_size)
