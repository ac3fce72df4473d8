"""Probability matrices and diagonal-sum anomaly scores."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import DimensionError, TrainedModel
from .dataio import SampleBatch, atomic_write_text
from .transforms import TransformError, TransformSet, apply, expand

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Row ``i`` is the predicted label distribution for the ``i``-th transform of one sample."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"probability matrix must be square, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValueError("probability matrix entries must be finite and non-negative")
        if np.abs(v.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("every row of a probability matrix must sum to 1")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()


@dataclass(frozen=True)
class ScoreReport:
    sample_id: str
    score: float
    diagonal: tuple
    transform_set: str
    model_id: str
    is_majority: bool | None = None


def _check_compatible(model, transform_set: TransformSet) -> None:
    if model.n_classes != transform_set.n:
        raise DimensionError(
            f"model predicts {model.n_classes} classes but transform set "
            f"{transform_set.name!r} has {transform_set.n} transforms"
        )


def probability_matrix(model, image: np.ndarray, transform_set: TransformSet | None = None) -> ProbabilityMatrix:
    """Classify each transformed counterpart of ``image``; rows follow the set order.

    ``model`` is anything exposing ``n_classes`` and ``predict_proba``.
    """
    transform_set = transform_set or model.transform_set
    _check_compatible(model, transform_set)
    stack = np.stack([img for img, _ in expand(np.asarray(image, dtype=np.float32), transform_set)])
    return ProbabilityMatrix(model.predict_proba(stack))


def score(P: ProbabilityMatrix) -> float:
    """Sum of the diagonal; ``n`` for perfect recognition, 1 for a uniform classifier."""
    return float(np.trace(P.values))


def probability_matrices(model, images: np.ndarray, transform_set: TransformSet | None = None) -> np.ndarray:
    """Vectorised probability matrices for a stack, shape ``(N, n, n)``."""
    transform_set = transform_set or model.transform_set
    _check_compatible(model, transform_set)
    images = np.asarray(images, dtype=np.float32)
    out = np.empty((len(images), transform_set.n, transform_set.n))
    if len(images) == 0:
        return out
    for i, spec in enumerate(transform_set.specs):
        out[:, i, :] = model.predict_proba(apply(images, spec))
    return out


def _sample_problem(image: np.ndarray, dims) -> str | None:
    if image.shape != tuple(dims):
        return f"image shape {image.shape} does not match model input {tuple(dims)}"
    if not np.isfinite(image).all():
        return "image contains non-finite values"
    if image.min() < 0 or image.max() > 1:
        return "image intensities outside [0, 1]"
    return None


def score_batch(model, images, transform_set: TransformSet | None = None, ids: Sequence[str] | None = None):
    """Score every sample of a batch, preserving input order.

    ``images`` is a ``SampleBatch`` (ids and majority flags are taken from it),
    an ``(N, H, W, C)`` stack, or a sequence of per-sample arrays. Invalid samples do not stop the batch; they
    are returned separately.

    Returns
    -------
    reports : list of ScoreReport
        One per valid sample, in input order.
    failures : dict
        Maps sample id to an error message.
    """
    transform_set = transform_set or model.transform_set
    _check_compatible(model, transform_set)
    flags = None
    if isinstance(images, SampleBatch):
        ids = images.ids if ids is None else ids
        flags = images.labels
        images = images.images
    if not isinstance(images, np.ndarray) or images.dtype == object:
        # ragged input: keep per-sample arrays so bad shapes can be reported individually
        images = [np.asarray(img) for img in images]
    ids = [str(i) for i in (ids if ids is not None else range(len(images)))]
    if len(ids) != len(images):
        raise ValueError(f"{len(ids)} ids for {len(images)} images")

    failures = {}
    good = []
    for k, img in enumerate(images):
        problem = _sample_problem(img, model.input_dims)
        if problem:
            failures[ids[k]] = problem
        else:
            good.append(k)
    if failures:
        logger.warning("%d of %d samples could not be scored", len(failures), len(images))
    if not good:
        return [], failures
    try:
        stack = np.stack([np.asarray(images[k], dtype=np.float32) for k in good])
        mats = probability_matrices(model, stack, transform_set)
    except TransformError as exc:
        # a transform can still fail per sample (e.g. rotation of a non-square image)
        for k in good:
            failures[ids[k]] = str(exc)
        return [], failures

    reports = []
    model_id = getattr(model, "model_id", "")
    for row, k in enumerate(good):
        diag = np.diag(mats[row])
        reports.append(ScoreReport(
            sample_id=ids[k],
            score=float(diag.sum()),
            diagonal=tuple(float(d) for d in diag),
            transform_set=transform_set.name,
            model_id=model_id,
            is_majority=None if flags is None else bool(flags[k]),
        ))
    return reports, failures


def scores_to_csv(reports: Sequence[ScoreReport]) -> str:
    """Header ``sample_id,score,is_majority,d1..dn``; the flag is empty when unknown."""
    n = len(reports[0].diagonal) if reports else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "score", "is_majority"] + [f"d{i}" for i in range(1, n + 1)])
    for r in reports:
        flag = "" if r.is_majority is None else int(r.is_majority)
        writer.writerow([r.sample_id, repr(r.score), flag] + [repr(d) for d in r.diagonal])
    return buf.getvalue()


def write_scores(reports: Sequence[ScoreReport], path: str | Path) -> None:
    atomic_write_text(path, scores_to_csv(reports))


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Return ``(ids, scores, is_majority)`` from a scores file; unknown flags become -1."""
    ids, scores, flags = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["sample_id"])
            scores.append(float(row["score"]))
            flags.append(int(row["is_majority"]) if row["is_majority"] != "" else -1)
    return ids, np.array(scores), np.array(flags)
