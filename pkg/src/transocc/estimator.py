"""scikit-learn compatible one-class detector."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from . import classifier as clf
from .scoring import probability_matrices
from .transforms import resolve
from .validation import check_images


class TransformRecognitionDetector(OutlierMixin, BaseEstimator):
    """One-class image detector trained only on majority-class images.

    ``fit`` trains an n-way classifier to tell apart the ``n`` transformed
    versions of every training image. A test image is scored by how well its
    own transformed versions are recognised: the trace of its ``n x n``
    probability matrix, between 0 and ``n`` (higher = more majority-like).

    Parameters
    ----------
    transform_set : str or TransformSet
        Preset name such as ``"LM(5,2)"``, a path to a set file, or a set.
    architecture : {"small_conv", "wide_residual"}
    depth, width_factor : int
        Wide residual network shape; ignored for ``small_conv``.
    learning_rate, batch_size, epochs : training schedule (Adam).
    contamination : float
        Fraction of training images that fall below ``offset_``; only
        affects ``predict`` and ``decision_function``.
    random_state : int
    n_threads : int
        Torch intra-op threads during training; fixed for reproducibility.

    Attributes
    ----------
    model_ : TrainedModel
    transform_set_ : TransformSet
    loss_curve_ : list of float
    offset_ : float
    """

    def __init__(self, transform_set="LM(5,0)", architecture="small_conv", depth=16, width_factor=4,
                 learning_rate=2e-4, batch_size=128, epochs=50, contamination=0.1,
                 random_state=0, n_threads=1):
        self.transform_set = transform_set
        self.architecture = architecture
        self.depth = depth
        self.width_factor = width_factor
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.contamination = contamination
        self.random_state = random_state
        self.n_threads = n_threads

    def fit(self, X, y=None):
        X = check_images(X)
        if not 0 <= self.contamination < 0.5:
            raise ValueError(f"contamination must lie in [0, 0.5), got {self.contamination}")
        self.transform_set_ = resolve(self.transform_set, image_size=X.shape[1])
        cc = clf.ClassifierConfig(
            n_classes=self.transform_set_.n, input_dims=X.shape[1:], architecture=self.architecture,
            depth=self.depth, width_factor=self.width_factor, seed=int(self.random_state),
        )
        tc = clf.TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                             epochs=self.epochs, num_threads=self.n_threads)
        self.model_ = clf.train(X, self.transform_set_, cc, tc)
        self.loss_curve_ = list(self.model_.loss_curve)
        self.n_classes_ = self.transform_set_.n
        self.offset_ = float(np.quantile(self.score_samples(X), self.contamination))
        return self

    def probability_matrices(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, dims=self.model_.input_dims)
        return probability_matrices(self.model_, X, self.transform_set_)

    def score_samples(self, X) -> np.ndarray:
        """Diagonal-sum score per image, in ``[0, n]``."""
        return np.trace(self.probability_matrices(X), axis1=1, axis2=2)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """+1 for majority-like images, -1 for the rest."""
        return np.where(self.decision_function(X) >= 0, 1, -1)
