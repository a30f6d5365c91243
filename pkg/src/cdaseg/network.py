"""Small stride-1 convolutional segmentation network, trained from scratch.

Forward and backward passes are written out explicitly (im2col plus
matmul) over a flat parameter vector, so the analytic gradient of the
full training objective can be audited coordinate-by-coordinate against
central finite differences.

The training objective mixes two strengths, balanced by ``gamma``:

* a supervised per-pixel cross-entropy on labeled source images, and
* cross-entropies between inferred target-domain label distributions
  (whole-image and/or landmark-superpixel one-hots) and the matching
  averages of the network's own predictions.

Optimization uses AdaDelta with the usual rho=0.95, eps=1e-6 defaults.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .distributions import LOG_EPS, cross_entropy
from .raster import Dataset, Image, LabelMask, read_tensor, write_tensor
from .scenes import SceneSample
from .superpixels import Landmark, SuperpixelPartition

CHECKPOINT_MAGIC = b"CDASEG"
CHECKPOINT_VERSION = 1

REGIMES = ("source-only", "image", "superpixel", "image+superpixel")


# ---------------------------------------------------------------------------
# Model definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegModel:
    """Layer descriptors plus one flat float parameter vector."""

    layers: tuple
    params: np.ndarray
    num_classes: int
    in_channels: int

    def param_shapes(self) -> list[tuple[tuple, tuple]]:
        """(weight shape, bias shape) per conv layer, in order."""
        shapes = []
        for layer in self.layers:
            if layer[0] == "conv":
                _, k, cin, cout = layer
                shapes.append(((k, k, cin, cout), (cout,)))
        return shapes

    def param_views(self) -> list[tuple[np.ndarray, np.ndarray]]:
        views = []
        offset = 0
        for wshape, bshape in self.param_shapes():
            wsize = int(np.prod(wshape))
            views.append((self.params[offset:offset + wsize].reshape(wshape),
                          self.params[offset + wsize:offset + wsize + bshape[0]]))
            offset += wsize + bshape[0]
        return views


def preset_layers(name: str, num_classes: int, in_channels: int = 3) -> tuple:
    if name != "small":
        raise ValueError(f"unknown architecture preset {name!r}")
    return (("conv", 3, in_channels, 16), ("relu",),
            ("conv", 3, 16, 16), ("relu",),
            ("conv", 3, 16, 16), ("relu",),
            ("conv", 1, 16, num_classes), ("softmax",))


def param_count(layers: tuple) -> int:
    total = 0
    for layer in layers:
        if layer[0] == "conv":
            _, k, cin, cout = layer
            total += k * k * cin * cout + cout
    return total


def init_model(arch_preset: str, num_classes: int, seed: int,
               in_channels: int = 3) -> SegModel:
    """He-scaled random conv weights, zero biases; deterministic by seed."""
    layers = preset_layers(arch_preset, num_classes, in_channels)
    rng = np.random.Generator(np.random.PCG64(seed))
    chunks = []
    for layer in layers:
        if layer[0] != "conv":
            continue
        _, k, cin, cout = layer
        fan_in = k * k * cin
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                 size=k * k * cin * cout))
        chunks.append(np.zeros(cout))
    return SegModel(layers=layers, params=np.concatenate(chunks),
                    num_classes=num_classes, in_channels=in_channels)


def layers_to_descriptor(model: SegModel) -> str:
    parts = []
    for layer in model.layers:
        if layer[0] == "conv":
            parts.append("conv,%d,%d,%d" % layer[1:])
        else:
            parts.append(layer[0])
    return f"in={model.in_channels};classes={model.num_classes};" + ";".join(parts)


def descriptor_to_layers(text: str) -> tuple[tuple, int, int]:
    fields = text.split(";")
    in_channels = int(fields[0].removeprefix("in="))
    num_classes = int(fields[1].removeprefix("classes="))
    layers = []
    for part in fields[2:]:
        if part.startswith("conv,"):
            _, k, cin, cout = part.split(",")
            layers.append(("conv", int(k), int(cin), int(cout)))
        elif part in ("relu", "softmax"):
            layers.append((part,))
        else:
            raise ValueError(f"unknown layer {part!r} in descriptor")
    return tuple(layers), num_classes, in_channels


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(H, W, C) -> (H*W, k*k*C) patches under same-padding, stride 1."""
    h, w, c = x.shape
    if k == 1:
        return x.reshape(h * w, c)
    pad = k // 2
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h, w, k * k, c))
    i = 0
    for dr in range(k):
        for dc in range(k):
            cols[:, :, i, :] = padded[dr:dr + h, dc:dc + w, :]
            i += 1
    return cols.reshape(h * w, k * k * c)


def _col2im(dcols: np.ndarray, k: int, h: int, w: int, c: int) -> np.ndarray:
    if k == 1:
        return dcols.reshape(h, w, c)
    pad = k // 2
    dpadded = np.zeros((h + 2 * pad, w + 2 * pad, c))
    dcols = dcols.reshape(h, w, k * k, c)
    i = 0
    for dr in range(k):
        for dc in range(k):
            dpadded[dr:dr + h, dc:dc + w, :] += dcols[:, :, i, :]
            i += 1
    return dpadded[pad:pad + h, pad:pad + w, :]


def _forward_with_cache(model: SegModel, x: np.ndarray):
    views = iter(model.param_views())
    caches = []
    for layer in model.layers:
        if layer[0] == "conv":
            _, k, cin, cout = layer
            wmat, bias = next(views)
            cols = _im2col(x, k)
            y = cols @ wmat.reshape(k * k * cin, cout) + bias
            caches.append(("conv", cols, x.shape, layer))
            x = y.reshape(x.shape[0], x.shape[1], cout)
        elif layer[0] == "relu":
            caches.append(("relu", x > 0))
            x = np.maximum(x, 0.0)
        elif layer[0] == "softmax":
            z = x - x.max(axis=2, keepdims=True)
            e = np.exp(z)
            x = e / e.sum(axis=2, keepdims=True)
            caches.append(("softmax", x))
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return x, caches


def forward(model: SegModel, img: Image | np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, shape (H, W, C)."""
    data = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != model.in_channels:
        raise ValueError(f"expected (H, W, {model.in_channels}) input, "
                         f"got {data.shape}")
    probs, _ = _forward_with_cache(model, data)
    return probs


def _backward(model: SegModel, caches: list, dprobs: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(model.params)
    grad_views = SegModel(layers=model.layers, params=grad,
                          num_classes=model.num_classes,
                          in_channels=model.in_channels).param_views()
    conv_idx = sum(1 for layer in model.layers if layer[0] == "conv")
    dx = dprobs
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "softmax":
            s = cache[1]
            dx = s * (dx - (dx * s).sum(axis=2, keepdims=True))
        elif kind == "relu":
            dx = dx * cache[1]
        else:
            _, cols, in_shape, layer = cache
            _, k, cin, cout = layer
            conv_idx -= 1
            gw, gb = grad_views[conv_idx]
            dy = dx.reshape(-1, cout)
            gb += dy.sum(axis=0)
            gw += (cols.T @ dy).reshape(k, k, cin, cout)
            dcols = dy @ model.param_views()[conv_idx][0].reshape(k * k * cin, cout).T
            dx = _col2im(dcols, k, in_shape[0], in_shape[1], cin)
    return grad


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetExample:
    """A target image with whatever inferred properties the regime needs."""

    image: Image
    image_dist: Optional[np.ndarray] = None
    partition: Optional[SuperpixelPartition] = None
    landmarks: Optional[list[Landmark]] = None


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    batch_source: int = 5
    batch_target: int = 5
    epochs: int = 12
    seed: int = 0
    regime: str = "source-only"
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    image_weight: float = 1.0
    superpixel_weight: float = 1.0
    arch: str = "small"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.batch_source < 1:
            raise ValueError("batch_source must be >= 1")
        if self.regime == "source-only":
            if self.batch_target != 0:
                raise ValueError("source-only training takes no target batch")
        elif self.batch_target < 1:
            raise ValueError("adapted regimes need batch_target >= 1")
        if not 0.0 < self.adadelta_rho < 1.0 or self.adadelta_eps <= 0:
            raise ValueError("need rho in (0, 1) and eps > 0")


def _source_pixel_ce(probs: np.ndarray, mask: LabelMask):
    """Mean cross-entropy over non-void pixels and its d/dprobs."""
    valid = mask.valid()
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(probs)
    rows, cols = np.nonzero(valid)
    classes = mask.labels[rows, cols]
    picked = probs[rows, cols, classes]
    loss = float(-np.log(picked).sum()) / n_valid
    dprobs = np.zeros_like(probs)
    dprobs[rows, cols, classes] = -1.0 / (picked * n_valid)
    return loss, dprobs


def _property_ce(target_dist: np.ndarray, probs: np.ndarray,
                 region: Optional[np.ndarray]):
    """Cross-entropy of a region-average prediction and its d/dprobs."""
    if region is None:
        avg = probs.mean(axis=(0, 1))
        count = probs.shape[0] * probs.shape[1]
    else:
        avg = probs[region].mean(axis=0)
        count = int(region.sum())
    loss = cross_entropy(target_dist, avg)
    davg = np.where((target_dist > 0) & (avg > LOG_EPS),
                    -target_dist / np.maximum(avg, LOG_EPS), 0.0)
    dprobs = np.zeros_like(probs)
    if region is None:
        dprobs += davg / count
    else:
        dprobs[region] = davg / count
    return loss, dprobs


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad: np.ndarray
    source_term: float
    target_term: float


def loss_and_grad(model: SegModel, batch_source: list[SceneSample],
                  batch_target: list[TargetExample],
                  cfg: TrainConfig) -> LossResult:
    """Objective value and exact analytic gradient over one mini-batch.

    loss = gamma/|S| * sum source pixel CE
         + (1-gamma)/|T| * sum over target images of the weighted property
           cross-entropies (whole image and/or mean over landmarks).
    Source-only: the first term alone, with gamma treated as 1.
    """
    _check_regime_inputs(batch_source, batch_target, cfg)
    grad = np.zeros_like(model.params)

    source_term = 0.0
    if batch_source:
        scale = 1.0 / len(batch_source)
        weight = scale if cfg.regime == "source-only" else cfg.gamma * scale
        for sample in batch_source:
            probs, caches = _forward_with_cache(model, sample.image.data)
            loss, dprobs = _source_pixel_ce(probs, sample.mask)
            source_term += loss * scale
            grad += _backward(model, caches, dprobs * weight)

    target_term = 0.0
    if batch_target and cfg.regime != "source-only":
        scale = 1.0 / len(batch_target)
        weight = (1.0 - cfg.gamma) * scale
        for example in batch_target:
            probs, caches = _forward_with_cache(model, example.image.data)
            dprobs = np.zeros_like(probs)
            image_loss = 0.0
            if cfg.regime in ("image", "image+superpixel"):
                loss, dp = _property_ce(example.image_dist, probs, None)
                image_loss += cfg.image_weight * loss
                dprobs += cfg.image_weight * dp
            if cfg.regime in ("superpixel", "image+superpixel") and example.landmarks:
                sp_loss = 0.0
                sp_dprobs = np.zeros_like(probs)
                for lm in example.landmarks:
                    region = example.partition.pixels(lm.segment)
                    loss, dp = _property_ce(lm.distribution, probs, region)
                    sp_loss += loss
                    sp_dprobs += dp
                image_loss += cfg.superpixel_weight * sp_loss / len(example.landmarks)
                dprobs += cfg.superpixel_weight * sp_dprobs / len(example.landmarks)
            target_term += image_loss * scale
            grad += _backward(model, caches, dprobs * weight)

    if cfg.regime == "source-only":
        total = source_term
    else:
        total = cfg.gamma * source_term + (1.0 - cfg.gamma) * target_term
    return LossResult(loss=total, grad=grad,
                      source_term=source_term, target_term=target_term)


def _check_regime_inputs(batch_source, batch_target, cfg: TrainConfig) -> None:
    if cfg.regime == "source-only":
        if batch_target:
            raise ValueError("source-only training must not receive target images")
        return
    for example in batch_target:
        if cfg.regime in ("image", "image+superpixel") and example.image_dist is None:
            raise ValueError(f"regime {cfg.regime!r} needs an image-level "
                             "distribution per target image")
        if cfg.regime in ("superpixel", "image+superpixel"):
            if example.landmarks is None or example.partition is None:
                raise ValueError(f"regime {cfg.regime!r} needs landmark data "
                                 "per target image")
            if not example.landmarks:
                import warnings
                warnings.warn("target image has an empty landmark set; its "
                              "superpixel term is skipped", stacklevel=3)


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------

@dataclass
class AdaDeltaState:
    accum_grad_sq: np.ndarray
    accum_update_sq: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdaDeltaState":
        return cls(np.zeros(n), np.zeros(n))


def adadelta_step(params: np.ndarray, grad: np.ndarray, state: AdaDeltaState,
                  rho: float = 0.95, eps: float = 1e-6):
    """One AdaDelta update; returns (new params, new state).

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx      = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    """
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise RuntimeError(f"non-finite gradient (first bad coordinate {bad}, "
                           f"|grad| max {np.abs(grad[np.isfinite(grad)]).max():g})")
    accum_grad = rho * state.accum_grad_sq + (1.0 - rho) * grad * grad
    update = -np.sqrt(state.accum_update_sq + eps) / np.sqrt(accum_grad + eps) * grad
    accum_update = rho * state.accum_update_sq + (1.0 - rho) * update * update
    return params + update, AdaDeltaState(accum_grad, accum_update)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _batch_stream(n: int, batch: int, rng: np.random.Generator):
    """Yield endless batches of shuffled indices, reshuffling per pass."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield order[start:start + batch]


def train(cfg: TrainConfig, source: Dataset, target: Optional[Dataset] = None,
          properties: Optional[list[TargetExample]] = None,
          model: Optional[SegModel] = None):
    """Mini-batch curriculum training; returns (model, per-epoch history).

    ``properties`` carries the per-target-image inferred distributions and
    landmarks, aligned with ``target``.  Target masks are never read: the
    target dataset must arrive mask-free.
    """
    adapted = cfg.regime != "source-only"
    if adapted:
        if target is None or properties is None:
            raise ValueError(f"regime {cfg.regime!r} needs a target dataset "
                             "and its inferred properties")
        if any(mask is not None for _, mask in target.items):
            raise ValueError("target dataset must not carry masks during "
                             "training; use Dataset.without_masks()")
        if len(properties) != len(target):
            raise ValueError("properties must align with the target dataset")
        examples = [replace(prop, image=img)
                    for prop, (img, _) in zip(properties, target.items)]

    seed_seq = np.random.SeedSequence(cfg.seed)
    init_ss, src_ss, tgt_ss = seed_seq.spawn(3)
    if model is None:
        model = init_model(cfg.arch, source.num_classes,
                           seed=int(init_ss.generate_state(1)[0]))
    state = AdaDeltaState.zeros(model.params.size)

    src_rng = np.random.Generator(np.random.PCG64(src_ss))
    tgt_rng = np.random.Generator(np.random.PCG64(tgt_ss))
    batch_source = min(cfg.batch_source, len(source))
    src_stream = _batch_stream(len(source), batch_source, src_rng)
    tgt_stream = (_batch_stream(len(target), min(cfg.batch_target, len(target)),
                                tgt_rng) if adapted else None)
    steps_per_epoch = max(1, len(source) // batch_source)

    history: list[tuple[float, float]] = []
    source_samples = [SceneSample(image=img, mask=mask)
                      for img, mask in source.items]
    for _ in range(cfg.epochs):
        src_sum = tgt_sum = 0.0
        for _ in range(steps_per_epoch):
            sbatch = [source_samples[i] for i in next(src_stream)]
            tbatch = [examples[i] for i in next(tgt_stream)] if adapted else []
            result = loss_and_grad(model, sbatch, tbatch, cfg)
            params, state = adadelta_step(model.params, result.grad, state,
                                          cfg.adadelta_rho, cfg.adadelta_eps)
            model = replace(model, params=params)
            src_sum += result.source_term
            tgt_sum += result.target_term
        history.append((src_sum / steps_per_epoch, tgt_sum / steps_per_epoch))
    return model, history


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------

class CurriculumSegmenter(BaseEstimator):
    """Pixel-wise segmenter with optional target-property regularization.

    fit(source) trains on labeled source scenes alone; with
    ``regime != "source-only"`` it also needs the unlabeled target dataset
    and per-image ``TargetExample`` properties, whose cross-entropy terms
    steer predictions on the target domain.
    """

    def __init__(self, regime: str = "source-only", gamma: float = 0.5,
                 batch_source: int = 5, batch_target: int = 5,
                 epochs: int = 12, seed: int = 0, adadelta_rho: float = 0.95,
                 adadelta_eps: float = 1e-6, image_weight: float = 1.0,
                 superpixel_weight: float = 1.0, arch: str = "small"):
        self.regime = regime
        self.gamma = gamma
        self.batch_source = batch_source
        self.batch_target = batch_target
        self.epochs = epochs
        self.seed = seed
        self.adadelta_rho = adadelta_rho
        self.adadelta_eps = adadelta_eps
        self.image_weight = image_weight
        self.superpixel_weight = superpixel_weight
        self.arch = arch

    def _config(self) -> TrainConfig:
        batch_target = 0 if self.regime == "source-only" else self.batch_target
        return TrainConfig(gamma=self.gamma, batch_source=self.batch_source,
                           batch_target=batch_target, epochs=self.epochs,
                           seed=self.seed, regime=self.regime,
                           adadelta_rho=self.adadelta_rho,
                           adadelta_eps=self.adadelta_eps,
                           image_weight=self.image_weight,
                           superpixel_weight=self.superpixel_weight,
                           arch=self.arch)

    def fit(self, source: Dataset, target: Optional[Dataset] = None,
            target_properties: Optional[list[TargetExample]] = None
            ) -> "CurriculumSegmenter":
        self.model_, self.history_ = train(self._config(), source, target,
                                           target_properties)
        return self

    def predict_proba(self, img: Image) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("CurriculumSegmenter is not fitted")
        return forward(self.model_, img)

    def predict(self, img: Image) -> LabelMask:
        probs = self.predict_proba(img)
        return LabelMask(np.argmax(probs, axis=2).astype(np.int32),
                         num_classes=self.model_.num_classes)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: SegModel,
                    state: Optional[AdaDeltaState] = None) -> None:
    descriptor = layers_to_descriptor(model).encode("utf-8")
    if state is None:
        state = AdaDeltaState.zeros(model.params.size)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(descriptor)))
        fh.write(descriptor)
        write_tensor(fh, model.params)
        write_tensor(fh, state.accum_grad_sq)
        write_tensor(fh, state.accum_update_sq)


def load_checkpoint(path) -> tuple[SegModel, AdaDeltaState]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = struct.unpack("<B", fh.read(1))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        length = struct.unpack("<I", fh.read(4))[0]
        layers, num_classes, in_channels = descriptor_to_layers(
            fh.read(length).decode("utf-8"))
        params = read_tensor(fh).astype(np.float64)
        state = AdaDeltaState(read_tensor(fh).astype(np.float64),
                              read_tensor(fh).astype(np.float64))
    model = SegModel(layers=layers, params=params,
                     num_classes=num_classes, in_channels=in_channels)
    if params.size != param_count(layers):
        raise ValueError(f"{path}: parameter count {params.size} does not "
                         f"match the descriptor ({param_count(layers)})")
    return model, state


# ---------------------------------------------------------------------------
# Finite-difference audit
# ---------------------------------------------------------------------------

def finite_difference_error(model: SegModel, batch_source, batch_target,
                            cfg: TrainConfig, coords: np.ndarray,
                            h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradient
    over the given flat parameter coordinates."""
    analytic = loss_and_grad(model, batch_source, batch_target, cfg).grad
    worst = 0.0
    for coord in coords:
        bumped = model.params.copy()
        bumped[coord] += h
        up = loss_and_grad(replace(model, params=bumped), batch_source,
                           batch_target, cfg).loss
        bumped[coord] -= 2 * h
        down = loss_and_grad(replace(model, params=bumped), batch_source,
                             batch_target, cfg).loss
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic[coord]), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic[coord] - numeric) / denom)
    return worst
