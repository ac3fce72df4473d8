"""One-class image classification by recognising intensity transformations.

A classifier learns to tell which of ``n`` contrast/brightness (or geometric)
transformations was applied to a majority-class image. Images the classifier
re-identifies confidently score high; minority-class images score low.
"""
__version__ = "0.1.0"

from .transforms import (GeometricSpec, LinearMagnificationSpec, TransformError, TransformSet, apply,
                         apply_geometric, apply_linear, expand, preset)
from .scoring import ProbabilityMatrix, ScoreReport, probability_matrix, score, score_batch
from .evaluation import EvalReport, LabeledScores, aggregate_runs, auc, aupr
from .estimator import TransformRecognitionDetector

__all__ = [
    "GeometricSpec", "LinearMagnificationSpec", "TransformError", "TransformSet", "apply",
    "apply_geometric", "apply_linear", "expand", "preset",
    "ProbabilityMatrix", "ScoreReport", "probability_matrix", "score", "score_batch",
    "EvalReport", "LabeledScores", "aggregate_runs", "auc", "aupr",
    "TransformRecognitionDetector",
]
