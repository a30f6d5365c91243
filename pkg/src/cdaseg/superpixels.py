"""Superpixels, their features, and confidence-ranked landmark selection.

The pipeline: segment an image into compact superpixels (local k-means in
joint color/position space), describe each one by averaged per-pixel class
scores plus the same block from its four axis neighbors, classify with a
one-vs-rest linear SVM, and keep the most confidently classified fraction
as landmarks.  Each landmark contributes a one-hot label distribution over
its pixels.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .raster import Image, LabelMask, load_tensor, save_tensor, write_tensor, read_tensor


@dataclass(frozen=True)
class SuperpixelPartition:
    """Pixel-to-superpixel assignment with per-superpixel metadata."""

    assignment: np.ndarray          # (H, W) ids in [0, num_segments)
    num_segments: int
    centroids: np.ndarray           # (K, 2) mean (row, col)
    sizes: np.ndarray               # (K,) pixel counts

    def __post_init__(self):
        if self.sizes.min() < 1:
            raise ValueError("every superpixel must own at least one pixel")
        if int(self.sizes.sum()) != self.assignment.size:
            raise ValueError("sizes do not cover the image")

    @property
    def height(self) -> int:
        return self.assignment.shape[0]

    @property
    def width(self) -> int:
        return self.assignment.shape[1]

    def pixels(self, segment: int) -> np.ndarray:
        """Boolean (H, W) membership map of one superpixel."""
        return self.assignment == segment


class Landmark(NamedTuple):
    segment: int
    label: int
    confidence: float
    distribution: np.ndarray        # one-hot over the classes


# ---------------------------------------------------------------------------
# SLIC-style segmentation
# ---------------------------------------------------------------------------

def slic(img: Image, n_segments: int, compactness: float = 0.25,
         iters: int = 10) -> SuperpixelPartition:
    """Segment into ~n_segments compact superpixels.

    K-means in the joint (color, position * compactness / S) space with
    S = sqrt(W*H / n_segments), seeded on a regular grid, followed by a
    connectivity pass that merges orphaned fragments into the adjacent
    superpixel with the nearest centroid.  Deterministic; the final count
    can differ from the request by the merged fragments.
    """
    h, w = img.height, img.width
    if n_segments > h * w:
        raise ValueError(f"cannot place {n_segments} superpixels on {h * w} pixels")
    if n_segments < 1 or compactness <= 0 or iters < 1:
        raise ValueError("need n_segments >= 1, compactness > 0, iters >= 1")

    spacing = math.sqrt(h * w / n_segments)
    ny = max(1, round(math.sqrt(n_segments * h / w)))
    nx = max(1, round(n_segments / ny))
    seed_rows = (np.arange(ny) + 0.5) * h / ny
    seed_cols = (np.arange(nx) + 0.5) * w / nx
    grid_r, grid_c = np.meshgrid(seed_rows, seed_cols, indexing="ij")
    pos_scale = compactness / spacing

    # Pixel centers (r + 0.5, c + 0.5) so grid-cell Voronoi boundaries land
    # between pixels; on a constant image the seeds then never move.
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5,
                             indexing="ij")
    pix = np.concatenate([img.data.reshape(h * w, -1),
                          pos_scale * rows.reshape(-1, 1),
                          pos_scale * cols.reshape(-1, 1)], axis=1)

    seed_r = np.clip(grid_r.ravel().astype(int), 0, h - 1)
    seed_c = np.clip(grid_c.ravel().astype(int), 0, w - 1)
    centers = np.concatenate([img.data[seed_r, seed_c],
                              pos_scale * grid_r.reshape(-1, 1),
                              pos_scale * grid_c.reshape(-1, 1)], axis=1)

    assignment = np.zeros(h * w, dtype=np.int32)
    for _ in range(iters):
        d2 = ((pix ** 2).sum(axis=1)[:, None]
              - 2.0 * pix @ centers.T
              + (centers ** 2).sum(axis=1)[None, :])
        assignment = np.argmin(d2, axis=1).astype(np.int32)
        for k in range(centers.shape[0]):
            members = pix[assignment == k]
            if members.shape[0]:           # empty clusters keep their center
                centers[k] = members.mean(axis=0)

    assignment = assignment.reshape(h, w)
    center_pos = centers[:, -2:] / pos_scale
    assignment = _merge_orphans(assignment, center_pos)
    return _finalize_partition(assignment)


def _connected_components(assignment: np.ndarray):
    """4-connected components of equal-id regions, in raster discovery order."""
    h, w = assignment.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    components = []
    for r0 in range(h):
        for c0 in range(w):
            if comp[r0, c0] != -1:
                continue
            cid = len(components)
            label = assignment[r0, c0]
            queue = deque([(r0, c0)])
            comp[r0, c0] = cid
            pixels = []
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and comp[rr, cc] == -1 \
                            and assignment[rr, cc] == label:
                        comp[rr, cc] = cid
                        queue.append((rr, cc))
            components.append((label, pixels))
    return comp, components


def _merge_orphans(assignment: np.ndarray, center_pos: np.ndarray) -> np.ndarray:
    """Reassign every non-largest fragment of each id to a neighbor id."""
    assignment = assignment.copy()
    h, w = assignment.shape
    _, components = _connected_components(assignment)

    largest: dict[int, int] = {}
    for idx, (label, pixels) in enumerate(components):
        best = largest.get(label)
        if best is None or len(pixels) > len(components[best][1]):
            largest[label] = idx

    for idx, (label, pixels) in enumerate(components):
        if largest[label] == idx:
            continue
        arr = np.array(pixels)
        centroid = arr.mean(axis=0)
        neighbors = set()
        for r, c in pixels:
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and assignment[rr, cc] != label:
                    neighbors.add(int(assignment[rr, cc]))
        if not neighbors:
            continue
        candidates = sorted(neighbors)
        dists = [np.hypot(*(center_pos[k] - centroid)) for k in candidates]
        target = candidates[int(np.argmin(dists))]
        assignment[arr[:, 0], arr[:, 1]] = target
    return assignment


def _finalize_partition(assignment: np.ndarray) -> SuperpixelPartition:
    ids = np.unique(assignment)
    remap = np.full(int(ids.max()) + 1, -1, dtype=np.int32)
    remap[ids] = np.arange(len(ids), dtype=np.int32)
    assignment = remap[assignment]
    k = len(ids)
    sizes = np.bincount(assignment.ravel(), minlength=k)
    rows, cols = np.meshgrid(np.arange(assignment.shape[0]),
                             np.arange(assignment.shape[1]), indexing="ij")
    centroids = np.stack([
        np.bincount(assignment.ravel(), weights=rows.ravel(), minlength=k) / sizes,
        np.bincount(assignment.ravel(), weights=cols.ravel(), minlength=k) / sizes,
    ], axis=1)
    return SuperpixelPartition(assignment=assignment, num_segments=k,
                               centroids=centroids, sizes=sizes)


# ---------------------------------------------------------------------------
# Supervision and features
# ---------------------------------------------------------------------------

def dominant_labels(part: SuperpixelPartition, mask: LabelMask) -> np.ndarray:
    """Modal non-void class per superpixel; ties go to the lower class,
    all-void superpixels to the mask's void value."""
    if part.assignment.shape != mask.labels.shape:
        raise ValueError("partition and mask sizes disagree")
    valid = mask.valid()
    counts = np.zeros((part.num_segments, mask.num_classes), dtype=np.int64)
    np.add.at(counts, (part.assignment[valid], mask.labels[valid]), 1)
    out = np.argmax(counts, axis=1).astype(np.int32)
    out[counts.sum(axis=1) == 0] = mask.void_value
    return out


def color_prototype_scores(img: Image, prototypes: np.ndarray,
                           temperature: float = 0.08) -> np.ndarray:
    """Per-pixel class-score raster of depth C + F.

    Distances to the C prototype colors are converted to softmin scores
    (closer prototype -> larger score) and concatenated with the raw
    channels, giving a cheap stand-in for learned per-pixel detectors.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    prototypes = np.asarray(prototypes, dtype=np.float64)
    dist = np.linalg.norm(img.data[:, :, None, :] - prototypes[None, None, :, :],
                          axis=3)
    logits = -dist / temperature
    logits -= logits.max(axis=2, keepdims=True)
    scores = np.exp(logits)
    scores /= scores.sum(axis=2, keepdims=True)
    return np.concatenate([scores, img.data], axis=2)


def superpixel_features(part: SuperpixelPartition,
                        pixel_scores: np.ndarray) -> np.ndarray:
    """(K, 5M) block features: own mean scores plus left/right/above/below.

    Neighbors are looked up at centroid +- one seed spacing; off-image or
    self-referring lookups contribute an all-zero block.
    """
    if pixel_scores.shape[:2] != part.assignment.shape:
        raise ValueError("pixel_scores shape does not match partition")
    if not np.all(np.isfinite(pixel_scores)):
        raise ValueError("pixel_scores must be finite")
    h, w = part.assignment.shape
    k = part.num_segments
    m = pixel_scores.shape[2]
    sums = np.zeros((k, m))
    np.add.at(sums, part.assignment.reshape(-1),
              pixel_scores.reshape(-1, m))
    means = sums / part.sizes[:, None]

    spacing = math.sqrt(h * w / k)
    offsets = [(0.0, -spacing), (0.0, spacing), (-spacing, 0.0), (spacing, 0.0)]
    feats = np.zeros((k, 5 * m))
    feats[:, :m] = means
    for j, (dr, dc) in enumerate(offsets):
        pts = part.centroids + np.array([dr, dc])
        rows = np.round(pts[:, 0]).astype(int)
        cols = np.round(pts[:, 1]).astype(int)
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        ids = np.full(k, -1, dtype=np.int64)
        ids[inside] = part.assignment[rows[inside], cols[inside]]
        usable = inside & (ids != np.arange(k))
        feats[usable, (j + 1) * m:(j + 2) * m] = means[ids[usable]]
    return feats


# ---------------------------------------------------------------------------
# One-vs-rest linear SVM (stochastic subgradient)
# ---------------------------------------------------------------------------

class SuperpixelClassifier(BaseEstimator):
    """Linear multi-class SVM trained with the Pegasos schedule.

    One binary hinge-loss classifier per class on a shared pass over the
    data, L2 strength ``lam``, learning rate 1/(lam*t).  No intercept is
    fit (``bias_`` stays zero), which keeps decisions exactly invariant
    under joint rescaling of features and lambda.
    """

    def __init__(self, epochs: int = 10, lam: float = 1e-3, seed: int = 0,
                 num_classes: int | None = None, confidence: str = "margin"):
        self.epochs = epochs
        self.lam = lam
        self.seed = seed
        self.num_classes = num_classes
        self.confidence = confidence

    def fit(self, X: np.ndarray, y: np.ndarray) -> "SuperpixelClassifier":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise ValueError("X must be (n, d) with one label per row")
        c = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= c:
            raise ValueError(f"labels must lie in [0, {c - 1}]")
        if len(np.unique(y)) == 1:
            warnings.warn("training labels are all one class; confidence "
                          "ranking will be degenerate", stacklevel=2)
        n, d = X.shape
        signs = np.full((n, c), -1.0)
        signs[np.arange(n), y] = 1.0

        rng = np.random.Generator(np.random.PCG64(self.seed))
        w = np.zeros((c, d))
        step = 0
        for _ in range(self.epochs):
            for i in rng.permutation(n):
                step += 1
                eta = 1.0 / (self.lam * step)
                x = X[i]
                margins = signs[i] * (w @ x)
                w *= 1.0 - eta * self.lam
                viol = margins < 1.0
                if viol.any():
                    w[viol] += eta * signs[i, viol, None] * x
        self.weights_ = w
        self.bias_ = np.zeros(c)
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise NotFittedError("SuperpixelClassifier is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.weights_.shape[1]:
            raise ValueError(f"feature dimension {X.shape[1]} does not match "
                             f"model ({self.weights_.shape[1]})")
        return X @ self.weights_.T + self.bias_

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def classify(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predicted classes plus confidence scores.

        Confidence is the top-1 margin (best minus runner-up decision
        value) by default, or the raw winning decision value when the
        estimator was built with ``confidence="decision"``.
        """
        scores = self.decision_function(X)
        classes = np.argmax(scores, axis=1)
        if scores.shape[1] == 1:
            conf = scores[:, 0]
        elif self.confidence == "decision":
            conf = scores[np.arange(len(scores)), classes]
        else:
            top2 = np.partition(scores, -2, axis=1)[:, -2:]
            conf = top2[:, 1] - top2[:, 0]
        return classes, conf


def select_landmarks(labels: np.ndarray, confidences: np.ndarray,
                     fraction: float, num_classes: int) -> list[Landmark]:
    """Keep the ceil(fraction * K) most confident superpixels.

    Sorted by confidence descending, ties toward the lower id; each kept
    entry carries the one-hot distribution of its predicted class.
    """
    labels = np.asarray(labels)
    confidences = np.asarray(confidences, dtype=np.float64)
    k = len(labels)
    if k == 0:
        raise ValueError("no classified superpixels to select from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    # small slack so decimal fractions like 0.6 * 5 do not ceil to 4
    keep = math.ceil(fraction * k - 1e-9)
    order = np.lexsort((np.arange(k), -confidences))
    out = []
    for idx in order[:keep]:
        dist = np.zeros(num_classes)
        dist[labels[idx]] = 1.0
        out.append(Landmark(segment=int(idx), label=int(labels[idx]),
                            confidence=float(confidences[idx]), distribution=dist))
    return out


# ---------------------------------------------------------------------------
# Export / persistence
# ---------------------------------------------------------------------------

def partition_to_mask(part: SuperpixelPartition) -> LabelMask:
    """View the assignment as a P5-exportable mask of superpixel ids."""
    if part.num_segments > 255:
        raise ValueError("cannot export more than 255 superpixels as P5")
    return LabelMask(part.assignment, num_classes=part.num_segments,
                     void_value=255)


def save_superpixel_classifier(model: SuperpixelClassifier, path) -> None:
    if not hasattr(model, "weights_"):
        raise NotFittedError("cannot save an unfitted model")
    with open(path, "wb") as fh:
        write_tensor(fh, model.weights_)
        write_tensor(fh, model.bias_)


def load_superpixel_classifier(path, confidence: str = "margin") -> SuperpixelClassifier:
    with open(path, "rb") as fh:
        weights = read_tensor(fh).astype(np.float64)
        bias = read_tensor(fh).astype(np.float64)
    model = SuperpixelClassifier(num_classes=weights.shape[0], confidence=confidence)
    model.weights_ = weights
    model.bias_ = bias
    return model
