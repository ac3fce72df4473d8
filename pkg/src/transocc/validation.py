"""Input checks shared by the estimator and the functional API."""
from __future__ import annotations

import numpy as np


def check_images(X, dims=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float32 ``(N, H, W, C)`` stack with values in [0, 1].

    A 3-D input is read as ``(N, H, W)`` gray images. Integer stacks are
    scaled by their dtype maximum.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be (N, H, W) or (N, H, W, C), got shape {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if np.issubdtype(X.dtype, np.integer):
        X = X.astype(np.float64) / np.iinfo(X.dtype).max
    elif not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"{name} has unsupported dtype {X.dtype}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinity")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    if dims is not None and X.shape[1:] != tuple(dims):
        raise ValueError(f"{name} has image shape {X.shape[1:]}, expected {tuple(dims)}")
    return np.ascontiguousarray(X, dtype=np.float32)
