"""Input validation helpers shared across the package.

Checks raise ``ValueError`` (or a subclass) with a message naming the
offending argument, so estimator and function signatures stay thin.
"""

from __future__ import annotations

import numpy as np

SIMPLEX_ATOL = 1e-6


class EmptyRegionError(ValueError):
    """A distribution was requested over a region with no pixels."""


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image_array(data: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, F) raster of values in [0, 1]."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"{name} must be (H, W, F), got shape {data.shape}")
    h, w, f = data.shape
    if h < 1 or w < 1 or f < 1:
        raise ValueError(f"{name} has a degenerate dimension: {data.shape}")
    check_finite(data, name)
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return data


def check_labels_array(labels: np.ndarray, num_classes: int, void_value: int,
                       name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"{name} must be (H, W), got shape {labels.shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    bad = (labels >= num_classes) & (labels != void_value)
    if bad.any() or labels.min() < 0:
        rows, cols = np.nonzero(bad) if bad.any() else np.nonzero(labels < 0)
        raise ValueError(
            f"{name} entry {labels[rows[0], cols[0]]} at ({rows[0]}, {cols[0]}) "
            f"outside [0, {num_classes - 1}] and not void ({void_value})")
    return labels


def check_distribution(probs: np.ndarray, num_classes: int | None = None,
                       name: str = "distribution") -> np.ndarray:
    """Validate a simplex vector: nonnegative, sums to 1 within tolerance."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {probs.shape}")
    if num_classes is not None and probs.shape[0] != num_classes:
        raise ValueError(f"{name} has {probs.shape[0]} entries, expected {num_classes}")
    check_finite(probs, name)
    if probs.min() < 0.0:
        raise ValueError(f"{name} has a negative entry")
    total = probs.sum()
    if abs(total - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"{name} sums to {total!r}, not 1 within {SIMPLEX_ATOL}")
    return probs


def check_prediction(probs: np.ndarray, num_classes: int | None = None,
                     name: str = "prediction") -> np.ndarray:
    """Validate an (H, W, C) stack of per-pixel softmax outputs."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"{name} must be (H, W, C), got shape {probs.shape}")
    if num_classes is not None and probs.shape[2] != num_classes:
        raise ValueError(f"{name} has {probs.shape[2]} channels, expected {num_classes}")
    check_finite(probs, name)
    if probs.min() < 0.0:
        raise ValueError(f"{name} has a negative entry")
    sums = probs.sum(axis=2)
    if np.abs(sums - 1.0).max() > SIMPLEX_ATOL:
        raise ValueError(f"{name} rows do not sum to 1 within {SIMPLEX_ATOL}")
    return probs


def check_matching_shape(a, b, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")
