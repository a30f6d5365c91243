"""Deterministic paired-domain scene generator.

Produces small "urban" rasters with a fixed vertical layout (sky band,
building band, then a road band at the bottom flanked by sidewalk strips)
plus rate-sampled foreground objects: cars on the road, poles, wall signs,
and trees standing at the street edge.  The two presets share class
semantics and palette; they differ only in appearance knobs (texture
period, lighting gain, noise level, horizon height), so the shift between
them is covariate-only.

All randomness comes from ``numpy.random.PCG64`` seeded per image, which
pins the output bit-for-bit for a given (params, size, seed) triple.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .raster import Dataset, Image, LabelMask

# Class layout shared by both domains.
SKY, BUILDING, ROAD, SIDEWALK, VEGETATION, CAR, POLE, SIGN = range(8)

CLASS_NAMES = ("sky", "building", "road", "sidewalk",
               "vegetation", "car", "pole", "sign")

_BASE_PALETTE = np.array([
    (0.55, 0.74, 0.95),   # sky
    (0.55, 0.50, 0.46),   # building
    (0.29, 0.29, 0.32),   # road
    (0.63, 0.61, 0.58),   # sidewalk
    (0.22, 0.52, 0.25),   # vegetation
    (0.72, 0.16, 0.14),   # car
    (0.42, 0.44, 0.40),   # pole
    (0.92, 0.79, 0.22),   # sign
])

# Per-image layout jitter (fractions of H), identical across domains so the
# within-domain variability dwarfs the between-domain mean shift.
_HORIZON_JITTER = 0.10
_ROAD_BASE_FRAC = 0.20
_ROAD_JITTER = 0.05
_WALK_FRAC = 0.05
_TEXTURE_AMPLITUDE = 0.18


def default_palette(num_classes: int) -> np.ndarray:
    """Base colors for ``num_classes`` classes; beyond 8, an HSV wheel."""
    if num_classes <= len(_BASE_PALETTE):
        return _BASE_PALETTE[:num_classes].copy()
    extra = []
    for i in range(len(_BASE_PALETTE), num_classes):
        hue = (i * 0.61803398875) % 1.0
        extra.append(_hsv_to_rgb(hue, 0.6, 0.8))
    return np.vstack([_BASE_PALETTE, np.array(extra)])


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


@dataclass(frozen=True)
class DomainParams:
    """Appearance and layout knobs for one domain."""

    num_classes: int = 8
    texture_period: float = 8.0
    noise_sigma: float = 0.03
    horizon_frac: float = 0.32
    lighting_gain: float = 1.0
    object_rate: float = 6.0
    palette: np.ndarray = field(default_factory=lambda: default_palette(8))

    def __post_init__(self):
        if self.num_classes < 8:
            raise ValueError("generator needs the 8 base classes; num_classes >= 8")
        if not (0.1 < self.horizon_frac < 0.6):
            raise ValueError("horizon_frac must lie in (0.1, 0.6)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lighting_gain <= 0:
            raise ValueError("lighting_gain must be > 0")
        if self.texture_period <= 0:
            raise ValueError("texture_period must be > 0")
        if self.object_rate < 0:
            raise ValueError("object_rate must be >= 0")
        palette = np.asarray(self.palette, dtype=np.float64)
        if palette.shape != (self.num_classes, 3):
            raise ValueError(f"palette must be ({self.num_classes}, 3)")
        if palette.min() < 0 or palette.max() > 1:
            raise ValueError("palette entries must lie in [0, 1]")
        object.__setattr__(self, "palette", palette)
        rows = {tuple(row) for row in palette}
        if len(rows) < self.num_classes:
            warnings.warn("palette has duplicate rows; classes will be "
                          "indistinguishable by color", stacklevel=2)


@dataclass(frozen=True)
class SceneSample:
    image: Image
    mask: LabelMask

    def __post_init__(self):
        if self.image.data.shape[:2] != self.mask.labels.shape:
            raise ValueError("image and mask sizes disagree")


def preset_source() -> DomainParams:
    """Simulator-style domain: coarse regular texture, harsh lighting."""
    return DomainParams(texture_period=8.0, noise_sigma=0.02,
                        horizon_frac=0.30, lighting_gain=1.20)


def preset_target() -> DomainParams:
    """Camera-style domain: finer texture, dimmer, noisier, higher horizon."""
    return DomainParams(texture_period=5.0, noise_sigma=0.06,
                        horizon_frac=0.40, lighting_gain=0.90)


def generate_scene(params: DomainParams, width: int, height: int,
                   seed: int) -> SceneSample:
    """Render one scene; pure function of (params, width, height, seed)."""
    if width < 16 or height < 16:
        raise ValueError("width and height must be >= 16")
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = height, width

    # Band geometry.  Jitters are drawn first, in a fixed order.
    horizon_frac = params.horizon_frac + rng.uniform(-_HORIZON_JITTER, _HORIZON_JITTER)
    road_frac = _ROAD_BASE_FRAC + rng.uniform(-_ROAD_JITTER, _ROAD_JITTER)
    walk = max(1, round(_WALK_FRAC * h))
    road = max(2, round(road_frac * h))
    walk_top = h - 2 * walk - road          # first row of the upper sidewalk
    road_top = h - walk - road
    horizon = int(np.clip(round(horizon_frac * h), 1, walk_top - 1))

    labels = np.empty((h, w), dtype=np.int32)
    labels[:horizon] = SKY
    labels[horizon:walk_top] = BUILDING
    labels[walk_top:road_top] = SIDEWALK
    labels[road_top:h - walk] = ROAD
    labels[h - walk:] = SIDEWALK

    # Facade shading: vertical blocks with windows.  Color-only detail; the
    # class stays "building".
    shade = np.ones((h, w))
    col = 0
    while col < w:
        bw = max(2, int(rng.uniform(0.12, 0.28) * w))
        shade[horizon:walk_top, col:col + bw] = rng.uniform(0.78, 1.06)
        win_rows = np.arange(horizon + 2, walk_top - 2, 5)
        win_cols = np.arange(col + 1, min(col + bw, w) - 1, 4)
        for r in win_rows:
            for c in win_cols:
                if rng.random() < 0.6:
                    shade[r:r + 2, c:c + 2] = 0.45
        col += bw

    n_objects = rng.poisson(params.object_rate)
    for _ in range(n_objects):
        kind = rng.choice(4, p=[0.45, 0.20, 0.15, 0.20])
        if kind == 0:      # car on the road
            cw = max(3, int(rng.uniform(0.10, 0.20) * w))
            ch = max(2, cw // 2)
            bottom = int(rng.integers(road_top + 1, h - walk))
            left = int(rng.integers(0, max(1, w - cw)))
            labels[max(0, bottom - ch):bottom, left:left + cw] = CAR
            shade[max(0, bottom - ch):bottom, left:left + cw] = rng.uniform(0.85, 1.15)
        elif kind == 1:    # pole standing on the upper sidewalk
            col_p = int(rng.integers(0, w))
            top = int(rng.integers(max(0, horizon - 3), max(1, walk_top - 4)))
            labels[top:road_top, col_p:col_p + 1] = POLE
        elif kind == 2:    # wall sign
            s = int(rng.integers(2, 5))
            r0 = int(rng.integers(horizon, max(horizon + 1, walk_top - s)))
            c0 = int(rng.integers(0, max(1, w - s)))
            labels[r0:r0 + s, c0:c0 + s] = SIGN
        else:              # tree at the street edge
            tw = int(rng.integers(3, 7))
            th = int(rng.integers(5, 10))
            bottom = walk_top + 1
            c0 = int(rng.integers(0, max(1, w - tw)))
            labels[max(0, bottom - th):bottom, c0:c0 + tw] = VEGETATION

    color = params.palette[labels]
    color = color * shade[:, :, None]

    # Periodic texture on every surface but the sky, which stays flat so
    # each image keeps a large smooth region.
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    period = params.texture_period
    texture = 1.0 + _TEXTURE_AMPLITUDE * (np.sin(2 * math.pi * cols / period)
                                          * np.sin(2 * math.pi * rows / period))
    textured = labels != SKY
    color[textured] *= texture[textured, None]

    color *= params.lighting_gain
    noise = rng.normal(0.0, 1.0, size=(h, w, 3)) * params.noise_sigma
    color = np.clip(color + noise, 0.0, 1.0)

    return SceneSample(image=Image(color),
                       mask=LabelMask(labels, params.num_classes))


def generate_dataset(params: DomainParams, n: int, width: int, height: int,
                     base_seed: int, domain_tag: str = "source") -> Dataset:
    """n scenes, item i seeded with base_seed + i; manifest ids are stable."""
    if n < 1:
        raise ValueError("n must be >= 1")
    items = []
    for i in range(n):
        sample = generate_scene(params, width, height, base_seed + i)
        items.append((sample.image, sample.mask))
    return Dataset(items=items, num_classes=params.num_classes,
                   domain_tag=domain_tag,
                   manifest=[f"{i:05d}" for i in range(n)])


# ---------------------------------------------------------------------------
# Flat text serialization
# ---------------------------------------------------------------------------

def domain_params_to_text(params: DomainParams) -> str:
    palette = ";".join(",".join(f"{v:.17g}" for v in row) for row in params.palette)
    lines = [
        f"num_classes = {params.num_classes}",
        f"texture_period = {params.texture_period:.17g}",
        f"noise_sigma = {params.noise_sigma:.17g}",
        f"horizon_frac = {params.horizon_frac:.17g}",
        f"lighting_gain = {params.lighting_gain:.17g}",
        f"object_rate = {params.object_rate:.17g}",
        f"palette = {palette}",
    ]
    return "\n".join(lines) + "\n"


def domain_params_from_text(text: str) -> DomainParams:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    palette = np.array([[float(v) for v in row.split(",")]
                        for row in fields["palette"].split(";")])
    return DomainParams(
        num_classes=int(fields["num_classes"]),
        texture_period=float(fields["texture_period"]),
        noise_sigma=float(fields["noise_sigma"]),
        horizon_frac=float(fields["horizon_frac"]),
        lighting_gain=float(fields["lighting_gain"]),
        object_rate=float(fields["object_rate"]),
        palette=palette,
    )


def with_overrides(params: DomainParams, **kwargs) -> DomainParams:
    return replace(params, **kwargs)
