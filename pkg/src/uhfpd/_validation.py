"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeMismatch


def check_features(X, n_features: int | None = None, dtype=np.float64) -> np.ndarray:
    """2-D finite float array, optionally with a fixed number of columns."""
    X = check_array(X, dtype=dtype, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeMismatch(f"expected {n_features} features per row, got {X.shape[1]}")
    return X


def check_labels(y, n_samples: int, n_classes: int = 4) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ShapeMismatch(f"expected {n_samples} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_sources(sources, n_samples: int):
    if sources is None:
        raise ValueError("class normalization needs the source class of every row")
    sources = list(sources)
    if len(sources) != n_samples:
        raise ShapeMismatch(f"expected {n_samples} source labels, got {len(sources)}")
    return sources
