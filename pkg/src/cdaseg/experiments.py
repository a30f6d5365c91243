"""Experiment orchestration: dataset materialization, source-model fitting,
target-property inference, the ablation grid, and report writing.

The ablation grid trains and scores six methods on identical data and
seeds: the source-only baseline, adaptation with the image-level
distribution term, raw superpixel-classifier painting, landmark-only
painting (everything else void), adaptation with the landmark term, and
adaptation with both terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import config_hash, domain_params_from_config
from .distributions import (DistributionRegressor, NearestNeighborDistribution,
                            SourceMeanDistribution, UniformDistribution,
                            chi2_distance, distribution_from_mask,
                            distribution_from_probs, features_for_images,
                            global_features, make_estimator)
from .evaluation import Metrics, evaluate_masks, evaluate_model
from .network import (CurriculumSegmenter, TargetExample, TrainConfig,
                      finite_difference_error, init_model)
from .parallel import map_ordered
from .raster import Dataset, Image, LabelMask, load_dataset, save_dataset
from .scenes import CLASS_NAMES, SceneSample, generate_dataset
from .superpixels import (Landmark, SuperpixelClassifier, SuperpixelPartition,
                          color_prototype_scores, dominant_labels,
                          select_landmarks, slic, superpixel_features)

ABLATION_METHODS = ("source-only", "adapt-image", "sp-classifier",
                    "sp-landmarks", "adapt-superpixel",
                    "adapt-image+superpixel")

DISTRIBUTION_METHODS = ("uniform", "baseline-net", "source-mean",
                        "nearest-neighbor", "logistic-regression")

_SPLIT_OFFSETS = {
    ("source", "train"): 0,
    ("target", "train"): 100_000,
    ("target", "val"): 200_000,
    ("target", "test"): 300_000,
}


def class_names(num_classes: int) -> list[str]:
    names = list(CLASS_NAMES[:num_classes])
    names += [f"class{i}" for i in range(len(names), num_classes)]
    return names


@dataclass
class ExperimentData:
    source_train: Dataset
    target_train: Dataset    # masks present but never read during training
    target_val: Dataset
    target_test: Dataset


def split_sizes(cfg) -> dict[tuple[str, str], int]:
    return {
        ("source", "train"): int(cfg["data.n_source"]),
        ("target", "train"): int(cfg["data.n_target"]),
        ("target", "val"): int(cfg["data.n_val"]),
        ("target", "test"): int(cfg["data.n_test"]),
    }


def generate_split(cfg, domain: str, split: str) -> Dataset:
    params = domain_params_from_config(cfg, domain)
    base_seed = int(cfg["seed"]) * 1_000_000 + _SPLIT_OFFSETS[(domain, split)]
    return generate_dataset(params, split_sizes(cfg)[(domain, split)],
                            int(cfg["data.width"]), int(cfg["data.height"]),
                            base_seed, domain_tag=domain)


def write_all_splits(cfg, root) -> list[Path]:
    """The ``gen`` command: materialize every split under ``root``."""
    written = []
    for domain, split in _SPLIT_OFFSETS:
        ds = generate_split(cfg, domain, split)
        written.append(save_dataset(ds, Path(root) / domain, split))
    return written


def materialize_datasets(cfg) -> ExperimentData:
    """Load datasets from ``data.root`` when present, else generate them."""
    root = str(cfg["data.root"])
    num_classes = int(cfg["data.num_classes"])

    def get(domain: str, split: str) -> Dataset:
        if root and (Path(root) / domain / split / "manifest.txt").exists():
            return load_dataset(Path(root) / domain, split, num_classes, domain)
        return generate_split(cfg, domain, split)

    return ExperimentData(source_train=get("source", "train"),
                          target_train=get("target", "train"),
                          target_val=get("target", "val"),
                          target_test=get("target", "test"))


# ---------------------------------------------------------------------------
# Source-domain models
# ---------------------------------------------------------------------------

def source_distributions(ds: Dataset) -> np.ndarray:
    return np.stack([distribution_from_mask(mask) for _, mask in ds.items])


def fit_estimator(cfg, source: Dataset, kind: Optional[str] = None):
    """Fit one of the global-distribution estimators on source data."""
    kind = kind or str(cfg["estimator.kind"])
    estimator = make_estimator(
        kind, int(cfg["data.num_classes"]), k=int(cfg["estimator.k"]),
        epochs=int(cfg["estimator.epochs"]), lr=float(cfg["estimator.lr"]),
        l2=float(cfg["estimator.l2"]),
        batch_size=int(cfg["estimator.batch_size"]),
        standardize=bool(cfg["estimator.standardize"]), seed=int(cfg["seed"]))
    features = features_for_images(source.images())
    estimator.fit(features, source_distributions(source))
    return estimator


@dataclass(frozen=True)
class SuperpixelSetup:
    n_segments: int
    compactness: float
    iters: int
    fraction: float
    temperature: float
    palette: np.ndarray

    @classmethod
    def from_config(cls, cfg) -> "SuperpixelSetup":
        palette = domain_params_from_config(cfg, "source").palette
        return cls(n_segments=int(cfg["superpix.n_segments"]),
                   compactness=float(cfg["superpix.compactness"]),
                   iters=int(cfg["superpix.iters"]),
                   fraction=float(cfg["superpix.fraction"]),
                   temperature=float(cfg["superpix.temperature"]),
                   palette=palette)

    def partition(self, img: Image) -> SuperpixelPartition:
        return slic(img, self.n_segments, self.compactness, self.iters)

    def features(self, img: Image, part: SuperpixelPartition) -> np.ndarray:
        scores = color_prototype_scores(img, self.palette, self.temperature)
        return superpixel_features(part, scores)


def fit_superpixel_svm(cfg, source: Dataset) -> SuperpixelClassifier:
    """SLIC + dominant labels + context features, then a linear SVM."""
    setup = SuperpixelSetup.from_config(cfg)

    def one(item):
        img, mask = item
        part = setup.partition(img)
        labels = dominant_labels(part, mask)
        feats = setup.features(img, part)
        keep = labels != mask.void_value
        return feats[keep], labels[keep]

    batches = map_ordered(one, source.items)
    features = np.vstack([f for f, _ in batches])
    labels = np.concatenate([l for _, l in batches])
    svm = SuperpixelClassifier(epochs=int(cfg["superpix.svm_epochs"]),
                               lam=float(cfg["superpix.svm_lambda"]),
                               seed=int(cfg["seed"]),
                               num_classes=int(cfg["data.num_classes"]),
                               confidence=str(cfg["superpix.confidence"]))
    return svm.fit(features, labels)


# ---------------------------------------------------------------------------
# Target-property inference
# ---------------------------------------------------------------------------

def infer_target_properties(cfg, images: list[Image], estimator,
                            svm: SuperpixelClassifier) -> list[TargetExample]:
    """Per-image estimated distribution, partition, and landmark set.

    Uses only models fit on the source domain; target masks are untouched.
    """
    setup = SuperpixelSetup.from_config(cfg)
    num_classes = int(cfg["data.num_classes"])

    def one(img: Image) -> TargetExample:
        dist = estimator.predict(global_features(img)[None, :])[0]
        part = setup.partition(img)
        labels, confidences = svm.classify(setup.features(img, part))
        landmarks = select_landmarks(labels, confidences, setup.fraction,
                                     num_classes)
        return TargetExample(image=img, image_dist=dist, partition=part,
                             landmarks=landmarks)

    return map_ordered(one, images)


def paint_superpixel_classes(part: SuperpixelPartition, labels: np.ndarray,
                             num_classes: int) -> LabelMask:
    """Every superpixel painted with its predicted class."""
    return LabelMask(np.asarray(labels, dtype=np.int32)[part.assignment],
                     num_classes=num_classes)


def paint_landmarks(part: SuperpixelPartition, landmarks: list[Landmark],
                    num_classes: int, void_value: int = 255) -> LabelMask:
    """Landmark superpixels painted with their class, the rest void."""
    out = np.full(part.assignment.shape, void_value, dtype=np.int32)
    for lm in landmarks:
        out[part.pixels(lm.segment)] = lm.label
    return LabelMask(out, num_classes=num_classes, void_value=void_value)


def superpixel_accuracies(cfg, svm: SuperpixelClassifier,
                          labeled: Dataset) -> tuple[float, float]:
    """(all-superpixel, landmark-only) classification accuracy on a labeled
    target split; ground truth is each superpixel's dominant label."""
    setup = SuperpixelSetup.from_config(cfg)
    num_classes = int(cfg["data.num_classes"])
    total = correct = lm_total = lm_correct = 0
    for img, mask in labeled.items:
        part = setup.partition(img)
        truth = dominant_labels(part, mask)
        pred, conf = svm.classify(setup.features(img, part))
        scored = truth != mask.void_value
        total += int(scored.sum())
        correct += int((pred[scored] == truth[scored]).sum())
        for lm in select_landmarks(pred, conf, setup.fraction, num_classes):
            if truth[lm.segment] == mask.void_value:
                continue
            lm_total += 1
            lm_correct += int(lm.label == truth[lm.segment])
    return correct / max(total, 1), lm_correct / max(lm_total, 1)


# ---------------------------------------------------------------------------
# Training regimes
# ---------------------------------------------------------------------------

def make_segmenter(cfg, regime: str) -> CurriculumSegmenter:
    source_only = regime == "source-only"
    return CurriculumSegmenter(
        regime=regime, gamma=float(cfg["train.gamma"]),
        batch_source=int(cfg["train.source_only_batch"] if source_only
                         else cfg["train.batch_source"]),
        batch_target=int(cfg["train.batch_target"]),
        epochs=int(cfg["train.epochs"]), seed=int(cfg["seed"]),
        adadelta_rho=float(cfg["train.adadelta_rho"]),
        adadelta_eps=float(cfg["train.adadelta_eps"]),
        image_weight=float(cfg["train.image_weight"]),
        superpixel_weight=float(cfg["train.superpixel_weight"]))


def train_regime(cfg, regime: str, data: ExperimentData,
                 properties: Optional[list[TargetExample]]) -> CurriculumSegmenter:
    seg = make_segmenter(cfg, regime)
    if regime == "source-only":
        return seg.fit(data.source_train)
    return seg.fit(data.source_train, data.target_train.without_masks(),
                   properties)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def format_number(x: float) -> str:
    return f"{x:.6g}"


def write_report(out_dir, stem: str, columns: list[str],
                 rows: list[tuple[str, list[float]]], cfg,
                 mark_max: bool = False) -> tuple[Path, Path]:
    """Aligned text table plus CSV; both carry a provenance footer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    footer = (f"# config={config_hash(cfg)} seed={cfg['seed']} "
              f"version={__version__}")

    csv_lines = [",".join(["method"] + columns)]
    for label, values in rows:
        csv_lines.append(",".join([label] + [format_number(v) for v in values]))
    csv_lines.append(footer)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n", newline="\n")

    best = None
    if mark_max:
        data = np.array([values for _, values in rows])
        best = data.max(axis=0)
    cells = [["method"] + columns]
    for label, values in rows:
        row = [label]
        for j, v in enumerate(values):
            text = format_number(v)
            if best is not None and v == best[j]:
                text += "*"
            row.append(text)
        cells.append(row)
    widths = [max(len(r[j]) for r in cells) for j in range(len(cells[0]))]
    text_lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                  for row in cells]
    text_lines.append(footer)
    text_path = out_dir / f"{stem}.txt"
    text_path.write_text("\n".join(text_lines) + "\n", newline="\n")
    return text_path, csv_path


def read_report_csv(path) -> tuple[list[str], list[tuple[str, list[float]]]]:
    lines = [line for line in Path(path).read_text().splitlines()
             if line and not line.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        fields = line.split(",")
        rows.append((fields[0], [float(v) for v in fields[1:]]))
    return header, rows


# ---------------------------------------------------------------------------
# The two report-producing experiments
# ---------------------------------------------------------------------------

def run_ablation(cfg) -> dict[str, Metrics]:
    """Train/evaluate all six methods on shared data; write both reports."""
    data = materialize_datasets(cfg)
    estimator = fit_estimator(cfg, data.source_train)
    svm = fit_superpixel_svm(cfg, data.source_train)
    properties = infer_target_properties(cfg, data.target_train.images(),
                                         estimator, svm)
    setup = SuperpixelSetup.from_config(cfg)
    num_classes = int(cfg["data.num_classes"])
    test_masks = [mask for _, mask in data.target_test.items]

    def painted(landmarks_only: bool) -> list[LabelMask]:
        def one(img: Image) -> LabelMask:
            part = setup.partition(img)
            labels, conf = svm.classify(setup.features(img, part))
            if landmarks_only:
                lms = select_landmarks(labels, conf, setup.fraction, num_classes)
                return paint_landmarks(part, lms, num_classes)
            return paint_superpixel_classes(part, labels, num_classes)
        return map_ordered(one, data.target_test.images())

    results: dict[str, Metrics] = {}
    for method in ABLATION_METHODS:
        if method == "sp-classifier":
            results[method] = evaluate_masks(painted(False), test_masks, num_classes)
        elif method == "sp-landmarks":
            results[method] = evaluate_masks(painted(True), test_masks, num_classes)
        else:
            regime = {"source-only": "source-only",
                      "adapt-image": "image",
                      "adapt-superpixel": "superpixel",
                      "adapt-image+superpixel": "image+superpixel"}[method]
            seg = train_regime(cfg, regime, data, properties)
            results[method] = evaluate_model(seg, data.target_test)

    columns = ["mean_iou"] + [f"iou_{name}" for name in class_names(num_classes)]
    rows = []
    for method in ABLATION_METHODS:
        m = results[method]
        iou_pct = [v * 100.0 if v >= 0 else v for v in m.per_class_iou]
        rows.append((method, [m.mean_iou * 100.0] + iou_pct))
    write_report(cfg["output.dir"], "ablation", columns, rows, cfg, mark_max=True)
    return results


def run_distribution_report(cfg) -> dict[str, float]:
    """Mean chi-squared between true and estimated target distributions,
    for every estimator plus the source-only network's own output."""
    data = materialize_datasets(cfg)
    source_feats = features_for_images(data.source_train.images())
    source_dists = source_distributions(data.source_train)
    truth = [distribution_from_mask(mask) for _, mask in data.target_test.items]
    test_feats = features_for_images(data.target_test.images())
    num_classes = int(cfg["data.num_classes"])

    baseline = train_regime(cfg, "source-only", data, None)
    predicted: dict[str, np.ndarray] = {}
    predicted["uniform"] = UniformDistribution(num_classes).fit().predict(test_feats)
    predicted["baseline-net"] = np.stack([
        distribution_from_probs(baseline.predict_proba(img))
        for img in data.target_test.images()])
    predicted["source-mean"] = SourceMeanDistribution().fit(
        source_feats, source_dists).predict(test_feats)
    predicted["nearest-neighbor"] = NearestNeighborDistribution(
        k=int(cfg["estimator.k"])).fit(source_feats, source_dists).predict(test_feats)
    lr = DistributionRegressor(
        epochs=int(cfg["estimator.epochs"]), lr=float(cfg["estimator.lr"]),
        l2=float(cfg["estimator.l2"]), batch_size=int(cfg["estimator.batch_size"]),
        standardize=bool(cfg["estimator.standardize"]), seed=int(cfg["seed"]))
    predicted["logistic-regression"] = lr.fit(source_feats, source_dists
                                              ).predict(test_feats)

    scores = {method: float(np.mean([chi2_distance(t, p)
                                     for t, p in zip(truth, predicted[method])]))
              for method in DISTRIBUTION_METHODS}
    rows = [(method, [scores[method]]) for method in DISTRIBUTION_METHODS]
    write_report(cfg["output.dir"], "distribution-match", ["mean_chi2"], rows, cfg)
    return scores


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------

def run_gradient_checks(seed: int = 0, probes: int = 24, h: float = 1e-3,
                        coords_per_probe: int = 10) -> tuple[float, list[float]]:
    """Finite-difference audit of the training gradient.

    Each probe draws a fresh small model, mini-batch, regime, and gamma,
    then compares ten random gradient coordinates against central
    differences.  Returns (max relative error, per-probe errors).
    """
    regimes = ("source-only", "image", "superpixel", "image+superpixel")
    num_classes = 4
    size = 8
    errors = []
    for probe in range(probes):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, probe])))
        regime = regimes[probe % len(regimes)]
        model = init_model("small", num_classes,
                           seed=int(rng.integers(2 ** 32)))

        def scene() -> SceneSample:
            img = Image(rng.random((size, size, 3)))
            labels = rng.integers(0, num_classes, size=(size, size))
            void = rng.random((size, size)) < 0.05
            labels = np.where(void, 255, labels)
            return SceneSample(image=img,
                               mask=LabelMask(labels.astype(np.int32), num_classes))

        batch_source = [scene() for _ in range(2)]
        batch_target = []
        if regime != "source-only":
            for _ in range(2):
                img = Image(rng.random((size, size, 3)))
                part = slic(img, 6, compactness=0.3, iters=3)
                raw = rng.random(num_classes) + 0.05
                labels = rng.integers(0, num_classes, size=part.num_segments)
                conf = rng.random(part.num_segments)
                batch_target.append(TargetExample(
                    image=img, image_dist=raw / raw.sum(), partition=part,
                    landmarks=select_landmarks(labels, conf, 0.6, num_classes)))
        cfg = TrainConfig(gamma=float(rng.uniform(0.1, 0.9)), batch_source=2,
                          batch_target=0 if regime == "source-only" else 2,
                          epochs=1, seed=0, regime=regime)
        coords = rng.choice(model.params.size, size=coords_per_probe,
                            replace=False)
        errors.append(finite_difference_error(model, batch_source,
                                              batch_target, cfg, coords, h))
    return max(errors), errors
