"""Synthetic microscopy-like data: a source domain and a shifted target.

Images are textured light backgrounds with elliptical "cells"; each
class has a color/size/shape signature, and one rare class deliberately
resembles a common one. The target domain applies a hue rotation,
contrast drop, blur, and renders a fraction of its images at a higher
resolution multiplier, so the within-domain image resolution varies.
Everything is bit-reproducible from the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Annotation, BBox, Dataset, Image, Sample, iou
from .seeding import derive_rng


@dataclass(frozen=True)
class ShapeProto:
    color: tuple[float, float, float]
    radius: tuple[float, float]     # min/max semi-minor axis, px at base resolution
    elongation: tuple[float, float]  # semi-major / semi-minor range
    ring: bool = False               # hollow center (interior washed toward background)


DEFAULT_PROTOS = (
    ShapeProto(color=(105.0, 62.0, 158.0), radius=(9.0, 13.0), elongation=(1.0, 1.2)),
    ShapeProto(color=(208.0, 118.0, 162.0), radius=(7.0, 10.0), elongation=(1.5, 2.0)),
    ShapeProto(color=(156.0, 44.0, 92.0), radius=(7.0, 10.0), elongation=(1.0, 1.3), ring=True),
    # rare class: close to class 1 in shape and hue, slightly bluer and smaller
    ShapeProto(color=(88.0, 76.0, 182.0), radius=(7.0, 10.0), elongation=(1.0, 1.2)),
)


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[str, ...] = ("mono", "elong", "ring", "rare")
    n_source: int = 80
    n_target_pool: int = 60
    n_target_test: int = 40
    size_range: tuple[int, int] = (144, 192)   # base-resolution image sides
    cells_range: tuple[int, int] = (3, 6)
    rare_class_id: int = 4
    rare_image_fraction: float = 0.15          # target images that carry the rare class
    source_rare_fraction: float = 0.5          # source keeps the class reasonably common
    hue_rotation_deg: float = 30.0
    contrast: float = 0.8
    blur_sigma: float = 1.0
    res_multiplier: int = 2
    res_fraction: float = 0.5                  # target images rendered at the multiplier
    source_val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if not 1 <= self.rare_class_id <= len(self.classes):
            raise ValueError("rare_class_id outside the class list")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("classes", "size_range", "cells_range"):
            if key in d:
                d[key] = tuple(d[key])
        return SynthConfig(**d)


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([214.0, 206.0, 218.0]) + rng.uniform(-6, 6, size=3)
    img = np.tile(base, (h, w, 1))
    coarse = rng.normal(0.0, 14.0, size=(h // 16 + 1, w // 16 + 1, 3))
    up = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)[:h, :w]
    img += gaussian_filter(up, sigma=(8.0, 8.0, 0.0))
    img += rng.normal(0.0, 3.0, size=(h, w, 3))
    return img


def _render_cell(
    img: np.ndarray, rng: np.random.Generator, proto: ShapeProto, cx, cy, a, b, theta
) -> BBox:
    """Paint one soft-edged rotated ellipse; returns its tight box."""
    h, w = img.shape[:2]
    ct, st = math.cos(theta), math.sin(theta)
    half_w = math.sqrt((a * ct) ** 2 + (b * st) ** 2)
    half_h = math.sqrt((a * st) ** 2 + (b * ct) ** 2)
    x0, x1 = max(0, int(cx - half_w - 1)), min(w, int(cx + half_w + 2))
    y0, y1 = max(0, int(cy - half_h - 1)), min(h, int(cy + half_h + 2))
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    d = np.sqrt(u * u + v * v)
    alpha = np.clip((1.0 - d) * min(a, b), 0.0, 1.0)

    color = np.array(proto.color) * rng.uniform(0.92, 1.08)
    cell = np.tile(color, (y1 - y0, x1 - x0, 1))
    cell += rng.normal(0.0, 6.0, size=cell.shape)
    cell *= (1.0 - 0.25 * d[:, :, None] ** 2)  # darker toward the rim
    if proto.ring:
        hole = np.clip(1.0 - (d[:, :, None] / 0.55) ** 2, 0.0, 1.0)
        cell = cell * (1.0 - 0.75 * hole) + img[y0:y1, x0:x1] * 0.75 * hole
    img[y0:y1, x0:x1] = alpha[:, :, None] * cell + (1 - alpha[:, :, None]) * img[y0:y1, x0:x1]

    return BBox(
        max(0.0, cx - half_w - 0.5),
        max(0.0, cy - half_h - 0.5),
        min(float(w), cx + half_w + 0.5),
        min(float(h), cy + half_h + 0.5),
    )


def _hue_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate RGB values around the gray axis."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    one_third = 1.0 / 3.0
    rt3 = math.sqrt(1.0 / 3.0)
    m = np.array(
        [
            [c + (1 - c) * one_third, one_third * (1 - c) - rt3 * s, one_third * (1 - c) + rt3 * s],
            [one_third * (1 - c) + rt3 * s, c + one_third * (1 - c), one_third * (1 - c) - rt3 * s],
            [one_third * (1 - c) - rt3 * s, one_third * (1 - c) + rt3 * s, c + one_third * (1 - c)],
        ]
    )
    return img @ m.T


def _render_image(
    cfg: SynthConfig,
    image_id: str,
    rng: np.random.Generator,
    class_ids: list[int],
    res_scale: int,
    shifted: bool,
) -> Sample:
    side = rng.integers(cfg.size_range[0], cfg.size_range[1] + 1)
    h = int(side) * res_scale
    w = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1)) * res_scale
    img = _textured_background(rng, h, w)

    annotations: list[Annotation] = []
    placed: list[BBox] = []
    for cid in class_ids:
        proto = DEFAULT_PROTOS[(cid - 1) % len(DEFAULT_PROTOS)]
        for _ in range(40):  # placement attempts
            b = rng.uniform(*proto.radius) * res_scale
            a = b * rng.uniform(*proto.elongation)
            theta = rng.uniform(0.0, math.pi)
            half_w = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
            half_h = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
            cx = rng.uniform(half_w + 2, w - half_w - 2)
            cy = rng.uniform(half_h + 2, h - half_h - 2)
            cand = BBox(cx - half_w - 0.5, cy - half_h - 0.5, cx + half_w + 0.5, cy + half_h + 0.5)
            if all(iou(cand, p) < 0.15 for p in placed):
                box = _render_cell(img, rng, proto, cx, cy, a, b, theta)
                placed.append(box)
                annotations.append(Annotation(box, cid))
                break
        else:
            raise ValueError(f"image {image_id!r}: no room left for a class-{cid} cell")

    if shifted:
        img = _hue_rotate(img, cfg.hue_rotation_deg)
        img = (img - 128.0) * cfg.contrast + 128.0
        if cfg.blur_sigma > 0:
            img = gaussian_filter(img, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0.0))

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(Image(image_id, pixels), tuple(annotations))


def _sample_classes(cfg: SynthConfig, rng: np.random.Generator, carry_rare: bool) -> list[int]:
    common = [c for c in range(1, len(cfg.classes) + 1) if c != cfg.rare_class_id]
    n_cells = int(rng.integers(cfg.cells_range[0], cfg.cells_range[1] + 1))
    ids = [int(rng.choice(common)) for _ in range(n_cells)]
    if carry_rare:
        ids[int(rng.integers(0, n_cells))] = cfg.rare_class_id
    return ids


def _render_split(cfg: SynthConfig, split: str, n: int, shifted: bool, rare_fraction: float) -> list[Sample]:
    n_rare = max(6, round(rare_fraction * n)) if rare_fraction > 0 else 0
    n_rare = min(n_rare, n)
    rare_flags = [i < n_rare for i in range(n)]
    hi_res = [shifted and (i % 2 == 1) for i in range(n)]  # every other target image at 2x
    order = derive_rng(cfg.seed, "synth-order", split).permutation(n)

    samples = []
    for slot, i in enumerate(order):
        rng = derive_rng(cfg.seed, "synth-image", split, int(i))
        samples.append(
            _render_image(
                cfg,
                f"{split}_{slot:04d}",
                rng,
                _sample_classes(cfg, rng, rare_flags[int(i)]),
                cfg.res_multiplier if hi_res[int(i)] else 1,
                shifted,
            )
        )
    return samples


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Render (source, target_train_pool, target_test); deterministic per seed."""
    source = Dataset(
        tuple(_render_split(cfg, "src", cfg.n_source, False, cfg.source_rare_fraction)),
        cfg.classes,
        "source",
    )
    pool = Dataset(
        tuple(_render_split(cfg, "tpool", cfg.n_target_pool, True, cfg.rare_image_fraction)),
        cfg.classes,
        "target-pool",
    )
    test = Dataset(
        tuple(_render_split(cfg, "ttest", cfg.n_target_test, True, cfg.rare_image_fraction)),
        cfg.classes,
        "target-test",
    )
    return source, pool, test


def split_train_val(d: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split into train and held-out parts."""
    n_val = max(1, round(val_fraction * len(d)))
    order = derive_rng(seed, "train-val-split").permutation(len(d))
    val_idx = set(int(i) for i in order[:n_val])
    train = tuple(s for i, s in enumerate(d.samples) if i not in val_idx)
    val = tuple(s for i, s in enumerate(d.samples) if i in val_idx)
    return (
        Dataset(train, d.classes, d.domain_tag),
        Dataset(val, d.classes, d.domain_tag + "-val"),
    )


def select_kshot(pool: Dataset, k: int, seed: int) -> Dataset:
    """Greedy seeded cover: keep adding the image that satisfies the most
    remaining per-class needs until every class appears in >= k images."""
    n_classes = pool.num_classes
    images_with = {c: sum(1 for s in pool if any(a.class_id == c for a in s.annotations))
                   for c in range(1, n_classes + 1)}
    short = [c for c, n in images_with.items() if n < k]
    if short:
        raise ValueError(f"pool has fewer than {k} images containing class(es) {short}")

    need = {c: k for c in range(1, n_classes + 1)}
    candidates = list(derive_rng(seed, "kshot-order").permutation(len(pool)))
    chosen: list[int] = []
    while any(v > 0 for v in need.values()):
        best_idx, best_gain = None, -1
        for i in candidates:
            cls_present = {a.class_id for a in pool.samples[int(i)].annotations}
            gain = sum(1 for c in cls_present if need.get(c, 0) > 0)
            if gain > best_gain:
                best_idx, best_gain = i, gain
        if best_gain <= 0:
            break
        candidates.remove(best_idx)
        chosen.append(int(best_idx))
        for c in {a.class_id for a in pool.samples[int(best_idx)].annotations}:
            if need.get(c, 0) > 0:
                need[c] -= 1

    chosen.sort()
    return Dataset(
        tuple(pool.samples[i] for i in chosen), pool.classes, pool.domain_tag + f"-{k}shot"
    )
