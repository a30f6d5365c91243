"""Label-distribution math and the global distribution estimators.

A label distribution is a plain length-C numpy vector on the simplex: the
per-class pixel-occupancy proportions of an image or region.  This module
provides the distribution arithmetic (cross entropy, chi-squared distance)
plus four estimators that predict a target image's distribution from
source-domain supervision alone: softmax regression on global image
features, mean of nearest neighbors, the source mean, and uniform.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .raster import Image, LabelMask, load_tensor, save_tensor
from .validation import EmptyRegionError, check_distribution, check_prediction

LOG_EPS = 1e-12

GLOBAL_FEATURE_DIM = 96
_HIST_BINS = 16
_GRID = 4


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Distribution arithmetic
# ---------------------------------------------------------------------------

def distribution_from_mask(mask: LabelMask) -> np.ndarray:
    """Per-class share of non-void pixels."""
    valid = mask.labels[mask.valid()]
    if valid.size == 0:
        raise EmptyRegionError("mask has no non-void pixels")
    counts = np.bincount(valid, minlength=mask.num_classes)
    return counts / valid.size


def distribution_from_probs(probs: np.ndarray,
                            region: np.ndarray | None = None) -> np.ndarray:
    """Mean of per-pixel softmax outputs over ``region`` (default: all).

    ``region`` is a boolean (H, W) map; the result inherits the simplex
    property from the softmax rows.
    """
    probs = check_prediction(probs)
    if region is None:
        flat = probs.reshape(-1, probs.shape[2])
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != probs.shape[:2]:
            raise ValueError("region shape does not match prediction")
        flat = probs[region]
    if flat.shape[0] == 0:
        raise EmptyRegionError("empty pixel region")
    return flat.mean(axis=0)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def cross_entropy(p: np.ndarray, p_hat: np.ndarray) -> float:
    """-sum_c p[c] * log(max(p_hat[c], eps)); zero-probability terms drop out."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(np.maximum(p_hat[nz], LOG_EPS))).sum())


def chi2_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric histogram chi-squared: 0.5 * sum (p-q)^2 / (p+q), in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    denom = p + q
    nz = denom > 0
    return float(0.5 * ((p[nz] - q[nz]) ** 2 / denom[nz]).sum())


def mean_distribution(dists: list[np.ndarray] | np.ndarray) -> np.ndarray:
    arr = np.asarray(dists, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a nonempty list of distributions")
    return arr.mean(axis=0)


def uniform_distribution(num_classes: int) -> np.ndarray:
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    return np.full(num_classes, 1.0 / num_classes)


def knn_distribution(query: np.ndarray, source_features: np.ndarray,
                     source_dists: np.ndarray, k: int) -> np.ndarray:
    """Mean distribution of the k nearest source items (l2 distance).

    Distance ties are broken toward the lower item index.
    """
    source_features = np.asarray(source_features, dtype=np.float64)
    source_dists = np.asarray(source_dists, dtype=np.float64)
    n = source_features.shape[0]
    if n == 0:
        raise ValueError("empty source set")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    d = np.linalg.norm(source_features - np.asarray(query, dtype=np.float64), axis=1)
    order = np.argsort(d, kind="stable")
    return source_dists[order[:k]].mean(axis=0)


# ---------------------------------------------------------------------------
# Global image features
# ---------------------------------------------------------------------------

def global_features(img: Image) -> np.ndarray:
    """96-D appearance/layout descriptor of a 3-channel image.

    Concatenates per-channel 16-bin value histograms (normalized) with a
    4x4 grid of per-cell per-channel means, so both the overall tone and
    the coarse spatial layout are visible to linear models.
    """
    if img.channels != 3:
        raise ValueError(f"expected 3 channels, got {img.channels}")
    data = img.data
    npix = data.shape[0] * data.shape[1]
    parts = []
    for ch in range(3):
        counts, _ = np.histogram(data[:, :, ch], bins=_HIST_BINS, range=(0.0, 1.0))
        parts.append(counts / npix)
    for block_rows in np.array_split(data, _GRID, axis=0):
        for cell in np.array_split(block_rows, _GRID, axis=1):
            parts.append(cell.mean(axis=(0, 1)))
    return np.concatenate(parts)


def features_for_images(images: list[Image]) -> np.ndarray:
    return np.stack([global_features(img) for img in images])


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DistributionRegressor(BaseEstimator):
    """Softmax regression trained against soft distribution targets.

    fit(X, Y) minimizes the mean cross entropy between the target
    distributions Y and softmax(W x + b), plus ``l2 * ||W||^2``, by
    mini-batch gradient descent with a fixed learning rate.  Deterministic
    for a fixed seed.
    """

    def __init__(self, epochs: int = 300, lr: float = 0.2, l2: float = 1e-4,
                 batch_size: int = 32, standardize: bool = True, seed: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.batch_size = batch_size
        self.standardize = standardize
        self.seed = seed

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "DistributionRegressor":
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] == 0:
            raise ValueError("X and Y must be nonempty matrices with equal row counts")
        n, d = X.shape
        c = Y.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = np.maximum(X.std(axis=0), 1e-8)
        else:
            self.mean_ = np.zeros(d)
            self.scale_ = np.ones(d)
        Xs = (X - self.mean_) / self.scale_

        rng = np.random.Generator(np.random.PCG64(self.seed))
        w = np.zeros((c, d))
        b = np.zeros(c)
        batch = max(1, min(self.batch_size, n))
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                xb, yb = Xs[idx], Y[idx]
                probs = _softmax_rows(xb @ w.T + b)
                epoch_loss += float(
                    -(yb * np.log(np.maximum(probs, LOG_EPS))).sum())
                dz = (probs - yb) / len(idx)
                w -= self.lr * (dz.T @ xb + 2.0 * self.l2 * w)
                b -= self.lr * dz.sum(axis=0)
            epoch_loss = epoch_loss / n + self.l2 * float((w ** 2).sum())
            if not np.isfinite(epoch_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
        self.weights_ = w
        self.bias_ = b
        self.n_samples_ = n
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise NotFittedError("DistributionRegressor is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.weights_.shape[1]:
            raise ValueError(f"feature dimension {X.shape[1]} does not match "
                             f"model ({self.weights_.shape[1]})")
        Xs = (X - self.mean_) / self.scale_
        return _softmax_rows(Xs @ self.weights_.T + self.bias_)


class NearestNeighborDistribution(BaseEstimator):
    """Predicts the mean distribution of the k nearest training items."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "NearestNeighborDistribution":
        self.X_ = np.asarray(X, dtype=np.float64)
        self.Y_ = np.asarray(Y, dtype=np.float64)
        if self.X_.shape[0] == 0:
            raise ValueError("empty source set")
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "X_"):
            raise NotFittedError("NearestNeighborDistribution is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([knn_distribution(x, self.X_, self.Y_, self.k) for x in X])


class SourceMeanDistribution(BaseEstimator):
    """Always predicts the mean training distribution."""

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "SourceMeanDistribution":
        self.mean_ = mean_distribution(np.asarray(Y, dtype=np.float64))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "mean_"):
            raise NotFittedError("SourceMeanDistribution is not fitted")
        n = np.atleast_2d(np.asarray(X)).shape[0]
        return np.tile(self.mean_, (n, 1))


class UniformDistribution(BaseEstimator):
    """Always predicts the uniform distribution over ``num_classes``."""

    def __init__(self, num_classes: int = 8):
        self.num_classes = num_classes

    def fit(self, X=None, Y=None) -> "UniformDistribution":
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(np.asarray(X)).shape[0]
        return np.tile(uniform_distribution(self.num_classes), (n, 1))


ESTIMATOR_KINDS = ("logistic-regression", "nearest-neighbor",
                   "source-mean", "uniform")


def make_estimator(kind: str, num_classes: int, *, k: int = 5,
                   epochs: int = 300, lr: float = 0.2, l2: float = 1e-4,
                   batch_size: int = 32, standardize: bool = True,
                   seed: int = 0) -> BaseEstimator:
    if kind == "logistic-regression":
        return DistributionRegressor(epochs=epochs, lr=lr, l2=l2,
                                     batch_size=batch_size,
                                     standardize=standardize, seed=seed)
    if kind == "nearest-neighbor":
        return NearestNeighborDistribution(k=k)
    if kind == "source-mean":
        return SourceMeanDistribution()
    if kind == "uniform":
        return UniformDistribution(num_classes=num_classes)
    raise ValueError(f"unknown estimator kind {kind!r}; "
                     f"expected one of {ESTIMATOR_KINDS}")


# ---------------------------------------------------------------------------
# Persistence (native tensor format + text sidecar)
# ---------------------------------------------------------------------------

def save_distribution_regressor(model: DistributionRegressor, path) -> None:
    if not hasattr(model, "weights_"):
        raise NotFittedError("cannot save an unfitted model")
    path = Path(path)
    save_tensor(model.weights_, path.with_suffix(path.suffix + ".weights"))
    save_tensor(model.bias_, path.with_suffix(path.suffix + ".bias"))
    save_tensor(np.stack([model.mean_, model.scale_]),
                path.with_suffix(path.suffix + ".scaling"))
    c, d = model.weights_.shape
    path.write_text(f"d = {d}\nc = {c}\n"
                    f"standardize = {str(model.standardize).lower()}\n"
                    f"trained_on = {model.n_samples_}\n")


def load_distribution_regressor(path) -> DistributionRegressor:
    path = Path(path)
    fields = dict(line.split(" = ") for line in path.read_text().splitlines())
    model = DistributionRegressor(standardize=fields["standardize"] == "true")
    model.weights_ = load_tensor(path.with_suffix(path.suffix + ".weights")).astype(np.float64)
    model.bias_ = load_tensor(path.with_suffix(path.suffix + ".bias")).astype(np.float64)
    scaling = load_tensor(path.with_suffix(path.suffix + ".scaling")).astype(np.float64)
    model.mean_, model.scale_ = scaling[0], scaling[1]
    model.n_samples_ = int(fields["trained_on"])
    expected = (int(fields["c"]), int(fields["d"]))
    if model.weights_.shape != expected:
        raise ValueError(f"sidecar says {expected}, tensors say {model.weights_.shape}")
    return model
