"""Synthetic clean-image corpus, augmentation, normalization and split assembly."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc

log = logging.getLogger(__name__)

PIXEL_MEAN = (0.481, 0.458, 0.408)
PIXEL_STD = (0.269, 0.261, 0.276)

CLEAN = "clean"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClassRule:
    name: str
    shape: str
    color: tuple[float, float, float]
    texture_freq: float
    texture_angle: float


DEFAULT_CLASSES = (
    ClassRule("red circle", "circle", (0.78, 0.26, 0.22), 4.0, 0.0),
    ClassRule("green square", "square", (0.30, 0.66, 0.32), 6.0, 0.8),
    ClassRule("blue triangle", "triangle", (0.24, 0.36, 0.78), 5.0, 1.6),
    ClassRule("yellow ring", "ring", (0.84, 0.76, 0.24), 3.0, 2.4),
    ClassRule("purple cross", "cross", (0.58, 0.30, 0.66), 7.0, 0.4),
    ClassRule("orange diamond", "diamond", (0.88, 0.52, 0.18), 4.0, 1.2),
    ClassRule("teal hexagon", "hexagon", (0.20, 0.62, 0.62), 6.0, 2.0),
    ClassRule("gray bar", "bar", (0.55, 0.55, 0.58), 5.0, 2.8),
)


@dataclass
class CorpusSpec:
    n_per_class: int = 100
    classes: tuple[ClassRule, ...] = DEFAULT_CLASSES
    image_size: int = 64
    seed: int = 17
    position_jitter: float = 0.15
    size_range: tuple[float, float] = (0.22, 0.34)
    color_jitter: float = 0.08
    # 1.0: class base color; 0.0: color drawn per image independent of class
    class_color_weight: float = 0.75
    texture_amplitude: float = 0.2
    id_prefix: str = "img"

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ImageBatch:
    """N×3×H×W pixels in [0, 1] plus per-image labels and provenance."""

    pixels: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)
    attack: list[str] = field(default_factory=list)
    epsilon: np.ndarray | None = None
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.pixels)
        if self.pixels.ndim != 4:
            raise gc.DimensionError(f"ImageBatch pixels must be N×C×H×W, got {self.pixels.shape}")
        if len(self.labels) != n:
            raise DataError(f"{n} images but {len(self.labels)} labels")
        if not self.ids:
            self.ids = [f"img{i:06d}" for i in range(n)]
        if not self.attack:
            self.attack = [CLEAN] * n
        if self.epsilon is None:
            self.epsilon = np.zeros(n)
        if not self.source_ids:
            self.source_ids = list(self.ids)

    def __len__(self):
        return len(self.pixels)

    def subset(self, idx) -> "ImageBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageBatch(
            self.pixels[idx], self.labels[idx], [self.ids[i] for i in idx],
            [self.attack[i] for i in idx], self.epsilon[idx], [self.source_ids[i] for i in idx],
        )

    def relabel(self, labels) -> "ImageBatch":
        return ImageBatch(self.pixels, np.asarray(labels), list(self.ids), list(self.attack),
                          self.epsilon.copy(), list(self.source_ids))

    @staticmethod
    def concat(batches: list["ImageBatch"]) -> "ImageBatch":
        batches = [b for b in batches if len(b)]
        return ImageBatch(
            np.concatenate([b.pixels for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [i for b in batches for i in b.ids],
            [a for b in batches for a in b.attack],
            np.concatenate([b.epsilon for b in batches]),
            [s for b in batches for s in b.source_ids],
        )


# ---------------------------------------------------------------------------
# rendering


def _shape_sdf(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Signed distance (positive inside, pixels) in the shape's rotated frame."""
    if kind == "circle":
        return r - np.hypot(u, v)
    if kind == "ring":
        return 0.28 * r - np.abs(np.hypot(u, v) - 0.72 * r)
    if kind == "square":
        return np.minimum(0.85 * r - np.abs(u), 0.85 * r - np.abs(v))
    if kind == "bar":
        return np.minimum(1.2 * r - np.abs(u), 0.42 * r - np.abs(v))
    if kind == "cross":
        arm = 0.32 * r
        a = np.minimum(r - np.abs(u), arm - np.abs(v))
        b = np.minimum(arm - np.abs(u), r - np.abs(v))
        return np.maximum(a, b)
    sides = {"triangle": 3, "diamond": 4, "hexagon": 6}.get(kind)
    if sides is None:
        raise DataError(f"unknown shape {kind!r}")
    apothem = r * np.cos(np.pi / sides)
    angles = 2 * np.pi * np.arange(sides) / sides + (np.pi / 4 if sides == 4 else 0.0)
    proj = np.stack([u * np.cos(t) + v * np.sin(t) for t in angles])
    return apothem - proj.max(axis=0)


def render_image(rule: ClassRule, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    cx = s / 2 + rng.uniform(-1, 1) * spec.position_jitter * s
    cy = s / 2 + rng.uniform(-1, 1) * spec.position_jitter * s
    r = rng.uniform(*spec.size_range) * s
    theta = rng.uniform(-0.35, 0.35)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    alpha = np.clip(_shape_sdf(rule.shape, u, v, r) + 0.5, 0.0, 1.0)

    # smooth two-color background ramp, muted
    c0, c1 = rng.uniform(0.35, 0.65, size=3), rng.uniform(0.35, 0.65, size=3)
    phi = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - s / 2) * np.cos(phi) + (yy - s / 2) * np.sin(phi)) / s + 0.5
    bg = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    free = rng.uniform(0.2, 0.9, size=3)
    base = spec.class_color_weight * np.asarray(rule.color) + (1 - spec.class_color_weight) * free
    color = np.clip(base + rng.uniform(-1, 1, size=3) * spec.color_jitter, 0, 1)
    ang = rule.texture_angle + rng.uniform(-0.2, 0.2)
    wave = np.sin(2 * np.pi * rule.texture_freq * (u * np.cos(ang) + v * np.sin(ang)) / (2 * r)
                  + rng.uniform(0, 2 * np.pi))
    fg = color[:, None, None] * (1 + spec.texture_amplitude * wave)
    img = alpha * fg + (1 - alpha) * bg
    return np.clip(img, 0.0, 1.0)


def generate_corpus(spec: CorpusSpec) -> ImageBatch:
    """Render ``n_per_class`` images per class; deterministic in ``spec``.

    Each image draws from its own stream seeded by (seed, class, index), so
    any image can be regenerated independently of the rest.
    """
    if spec.n_classes < 1 or spec.n_per_class < 1:
        raise DataError("corpus needs at least one class and one image per class")
    pixels, labels, ids = [], [], []
    for k, rule in enumerate(spec.classes):
        for i in range(spec.n_per_class):
            rng = np.random.default_rng([spec.seed, k, i])
            pixels.append(render_image(rule, spec, rng))
            labels.append(k)
            ids.append(f"{spec.id_prefix}-{k}-{i:05d}")
    return ImageBatch(np.stack(pixels), np.array(labels), ids)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    # 21 at 224 px, scaled to the 64 px desk resolution
    blur_kernel: int = 7
    blur_sigma: tuple[float, float] = (0.1 * 64 / 224, 2.0 * 64 / 224)
    enabled: bool = True


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of C×H×W with half-pixel centers."""
    _, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _random_crop_box(h, w, cfg: AugmentConfig, rng):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = np.exp(rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1])))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def augment(x: ImageBatch, cfg: AugmentConfig, rng: np.random.Generator) -> ImageBatch:
    """Random resized crop, horizontal flip, Gaussian blur; training only."""
    if not cfg.enabled:
        return x
    out = np.empty_like(x.pixels)
    _, _, h, w = x.pixels.shape
    for n, img in enumerate(x.pixels):
        top, left, ch, cw = _random_crop_box(h, w, cfg, rng)
        if (ch, cw) != (h, w):
            img = resize_bilinear(img[:, top:top + ch, left:left + cw], h, w)
        if rng.random() < cfg.flip_prob:
            img = img[:, :, ::-1]
        if rng.random() < cfg.blur_prob:
            k = gaussian_kernel(cfg.blur_kernel, rng.uniform(*cfg.blur_sigma))
            # reflect-pad so blur does not darken borders
            r = cfg.blur_kernel // 2
            padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="reflect")
            img = gc.conv2d_fixed(gc.Tensor(padded[None]), k).data[0, :, r:r + h, r:r + w]
        out[n] = np.clip(img, 0.0, 1.0)
    return ImageBatch(out, x.labels.copy(), list(x.ids), list(x.attack), x.epsilon.copy(), list(x.source_ids))


# ---------------------------------------------------------------------------
# normalization


def normalize(x) -> gc.Tensor:
    """Per-channel (x - mean) / std with the fixed pixel statistics; differentiable."""
    t = x if isinstance(x, gc.Tensor) else gc.Tensor(x.pixels if isinstance(x, ImageBatch) else x)
    std = np.asarray(PIXEL_STD)
    return gc.channel_affine(t, 1.0 / std, -np.asarray(PIXEL_MEAN) / std)


def denormalize(t) -> np.ndarray:
    data = t.data if isinstance(t, gc.Tensor) else np.asarray(t)
    return data * np.asarray(PIXEL_STD).reshape(1, -1, 1, 1) + np.asarray(PIXEL_MEAN).reshape(1, -1, 1, 1)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetManifest:
    clean_count: int = 1999
    adversarial_per_attack: dict[str, int] = field(default_factory=dict)
    test_clean: int = 2000
    test_per_attack: int = 2000
    val_fraction: float = 0.1
    seed: int = 17
    splits: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def published_preset(cls, attacks, seed: int = 17) -> "DatasetManifest":
        return cls(1999, {a: 1000 for a in attacks}, 2000, 2000, 0.1, seed)

    def to_json(self) -> dict:
        return asdict(self)


def _stratified_take(groups: dict[tuple, list[int]], counts: dict[tuple, int], rng) -> tuple[list[int], dict]:
    taken, rest = [], {}
    for key in sorted(groups):
        idx = list(groups[key])
        rng.shuffle(idx)
        n = counts.get(key, 0)
        if n > len(idx):
            raise DataError(f"requested {n} items for {key} but only {len(idx)} available")
        taken.extend(idx[:n])
        rest[key] = idx[n:]
    return taken, rest


def assemble(manifest: DatasetManifest, clean: ImageBatch, adversarial: ImageBatch | None = None,
             test_clean: ImageBatch | None = None, test_adversarial: ImageBatch | None = None) -> dict[str, ImageBatch]:
    """Build detector train/val/test splits labelled 0 = clean, 1 = adversarial.

    The training pool (``clean_count`` clean plus the per-attack counts) is
    split into train and a ``val_fraction`` validation subset, stratified by
    (label, attack) with a seeded shuffle.  Test images come from the separate
    held-out batches when given.
    """
    rng = np.random.default_rng(manifest.seed)
    pool = ImageBatch.concat([b for b in (clean, adversarial) if b is not None])
    pool = pool.relabel([0 if a == CLEAN else 1 for a in pool.attack])

    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(pool.attack):
        groups.setdefault((int(pool.labels[i]), a), []).append(i)
    want = {(0, CLEAN): manifest.clean_count}
    want.update({(1, a): n for a, n in manifest.adversarial_per_attack.items()})
    chosen, _ = _stratified_take(groups, want, rng)

    chosen_groups: dict[tuple, list[int]] = {}
    for i in chosen:
        chosen_groups.setdefault((int(pool.labels[i]), pool.attack[i]), []).append(i)
    val_counts = {k: int(round(len(v) * manifest.val_fraction)) for k, v in chosen_groups.items()}
    val_idx, rest = _stratified_take(chosen_groups, val_counts, rng)
    train_idx = [i for k in sorted(rest) for i in rest[k]]
    train_idx = list(rng.permutation(train_idx))
    splits = {"train": pool.subset(train_idx), "val": pool.subset(sorted(val_idx))}

    if test_clean is not None or test_adversarial is not None:
        tpool = ImageBatch.concat([b for b in (test_clean, test_adversarial) if b is not None])
        tpool = tpool.relabel([0 if a == CLEAN else 1 for a in tpool.attack])
        tgroups: dict[tuple, list[int]] = {}
        for i, a in enumerate(tpool.attack):
            tgroups.setdefault((int(tpool.labels[i]), a), []).append(i)
        twant = {k: (manifest.test_clean if k[0] == 0 else manifest.test_per_attack) for k in tgroups}
        tidx, _ = _stratified_take(tgroups, twant, rng)
        splits["test"] = tpool.subset(sorted(tidx))

    seen: set[str] = set()
    for name, b in splits.items():
        ids = set(b.ids)
        if ids & seen:
            raise DataError(f"split {name} shares ids with another split")
        seen |= ids
    manifest.splits = {k: list(v.ids) for k, v in splits.items()}
    return splits
