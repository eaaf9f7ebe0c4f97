"""Resolution-aware copy-paste augmentation for rare classes.

Donor cell patches are rescaled by the donor/recipient image-resolution
ratio before pasting, so a pasted cell occupies the same physical scale
as native cells in the recipient, and its aspect ratio is preserved up
to 1-px rounding. Pastes go into empty regions (no overlap with ground
truth or earlier pastes) and continue per rare class until its instance
count reaches the pre-augmentation median.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .data import Annotation, BBox, Dataset, Image, Sample, class_histogram
from .seeding import derive_seed

CONTEXT_MARGIN = 2  # px of donor context kept around the annotated box


@dataclass(frozen=True)
class PatchTransform:
    """Geometry record for one donor-to-recipient patch rescale."""

    src_dims: tuple[int, int]       # (h1, w1) donor image
    dst_dims: tuple[int, int]       # (h2, w2) recipient image
    patch_dims: tuple[int, int]     # (h, w) of the donor patch
    p_ratio: float                  # patch h / w
    scale: float                    # uniform factor applied to both patch dims
    adjusted_dims: tuple[int, int]  # (h, w) after rescale, rounded, >= 1

    def __post_init__(self):
        for dims in (self.src_dims, self.dst_dims, self.patch_dims, self.adjusted_dims):
            if min(dims) < 1:
                raise ValueError(f"non-positive dims in {self}")


@dataclass(frozen=True)
class PasteOp:
    donor_image_id: str
    donor_rect: tuple[int, int, int, int]  # x0, y0, x1, y1 in donor pixels, margin included
    transform: PatchTransform
    position: tuple[int, int]              # top-left (x, y) in the recipient
    class_id: int
    jitter_seed: int
    new_box: BBox                          # annotation added to the recipient


@dataclass(frozen=True)
class PastePlan:
    recipient_image_id: str
    pastes: tuple[PasteOp, ...]


def find_rare_classes(d: Dataset, k: int) -> list[int]:
    """Classes whose instance count is strictly below the per-class median."""
    if len(d) == 0:
        raise ValueError("empty dataset")
    counts = class_histogram(d)
    median = float(np.median(list(counts.values())))
    return sorted(c for c, n in counts.items() if n < median)


def compute_patch_dims(
    src_dims: tuple[int, int],
    dst_dims: tuple[int, int],
    patch_dims: tuple[int, int],
) -> PatchTransform:
    """Uniform rescale of a patch from donor resolution to recipient resolution.

    Same donor/recipient dims leave the patch untouched; otherwise both
    patch dimensions are multiplied by h2/h1 for portrait recipients
    (h2 > w2) and by w2/w1 otherwise, which keeps the aspect ratio exact
    before rounding.
    """
    h1, w1 = src_dims
    h2, w2 = dst_dims
    ph, pw = patch_dims
    if min(h1, w1, h2, w2, ph, pw) < 1:
        raise ValueError("all dims must be >= 1")
    if (h1, w1) == (h2, w2):
        scale = 1.0
        adjusted = (ph, pw)
    else:
        scale = h2 / h1 if h2 > w2 else w2 / w1
        adjusted = (
            max(1, math.floor(scale * ph + 0.5)),
            max(1, math.floor(scale * pw + 0.5)),
        )
    return PatchTransform(
        src_dims=(h1, w1),
        dst_dims=(h2, w2),
        patch_dims=(ph, pw),
        p_ratio=ph / pw,
        scale=scale,
        adjusted_dims=adjusted,
    )


def _overlaps(x0: float, y0: float, x1: float, y1: float, box: BBox) -> bool:
    return x0 < box.x_max and x1 > box.x_min and y0 < box.y_max and y1 > box.y_min


def find_empty_regions(
    img: Image,
    gt: Sequence[Annotation | BBox],
    dims: tuple[int, int],
) -> list[tuple[int, int]]:
    """Top-left positions where an h x w rectangle fits with zero overlap.

    Scans a fixed stride-dims/2 grid row by row; accepted rectangles are
    reserved, so the returned positions are mutually disjoint. Empty when
    no placement exists.
    """
    h, w = dims
    blocked = [a.box if isinstance(a, Annotation) else a for a in gt]
    if h > img.height or w > img.width:
        return []
    sy, sx = max(1, h // 2), max(1, w // 2)
    reserved: list[BBox] = []
    positions: list[tuple[int, int]] = []
    for y in range(0, img.height - h + 1, sy):
        for x in range(0, img.width - w + 1, sx):
            x1, y1 = x + w, y + h
            if any(_overlaps(x, y, x1, y1, b) for b in blocked):
                continue
            if any(_overlaps(x, y, x1, y1, b) for b in reserved):
                continue
            reserved.append(BBox(x, y, x1, y1))
            positions.append((x, y))
    return positions


def photometric_jitter(patch: np.ndarray, seed: int) -> np.ndarray:
    """Per-channel intensity scale in [0.8, 1.2] followed by Gaussian blur
    with sigma drawn from [0, 1]; output clipped to uint8 range."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(0.8, 1.2, size=3)
    sigma = rng.uniform(0.0, 1.0)
    out = patch.astype(np.float64) * factors
    out = gaussian_filter(out, sigma=(sigma, sigma, 0.0))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _donor_rect(sample: Sample, ann: Annotation) -> tuple[int, int, int, int]:
    img = sample.image
    x0 = max(0, math.floor(ann.box.x_min) - CONTEXT_MARGIN)
    y0 = max(0, math.floor(ann.box.y_min) - CONTEXT_MARGIN)
    x1 = min(img.width, math.ceil(ann.box.x_max) + CONTEXT_MARGIN)
    y1 = min(img.height, math.ceil(ann.box.y_max) + CONTEXT_MARGIN)
    return x0, y0, x1, y1


def plan_raug(d: Dataset, k: int, seed: int) -> list[PastePlan]:
    """Build the deterministic paste schedule for every rare class.

    Donors rotate in (image, annotation) order; each paste goes to the
    image currently holding the fewest instances of the class (ties by
    image index, donor's own image excluded). A donor that fits nowhere
    is retired: free space only shrinks as pastes accumulate.
    """
    counts = class_histogram(d)
    median = float(np.median(list(counts.values()))) if counts else 0.0
    rare = find_rare_classes(d, k)

    blocked: list[list[BBox]] = [[a.box for a in s.annotations] for s in d]
    pastes_per_image: list[list[PasteOp]] = [[] for _ in d]
    live_counts = dict(counts)

    for cls in rare:
        donors = [
            (si, ai)
            for si, s in enumerate(d.samples)
            for ai, a in enumerate(s.annotations)
            if a.class_id == cls
        ]
        if not donors:
            continue
        per_image_cls = [sum(1 for a in s.annotations if a.class_id == cls) for s in d]
        active = list(donors)
        donor_idx = 0
        while live_counts[cls] < median and active:
            si, ai = active[donor_idx % len(active)]
            sample = d.samples[si]
            ann = sample.annotations[ai]
            rect = _donor_rect(sample, ann)
            ph, pw = rect[3] - rect[1], rect[2] - rect[0]

            placed = False
            order = sorted(
                (ri for ri in range(len(d.samples)) if ri != si),
                key=lambda ri: (per_image_cls[ri], ri),
            )
            for ri in order:
                rec = d.samples[ri].image
                tf = compute_patch_dims(
                    (sample.image.height, sample.image.width),
                    (rec.height, rec.width),
                    (ph, pw),
                )
                ah, aw = tf.adjusted_dims
                positions = find_empty_regions(rec, blocked[ri], (ah, aw))
                if not positions:
                    continue
                x, y = positions[0]
                # annotation box: the original cell box mapped through the
                # effective per-axis scale of the rounded patch
                sx_eff, sy_eff = aw / pw, ah / ph
                ix0, iy0 = ann.box.x_min - rect[0], ann.box.y_min - rect[1]
                ix1, iy1 = ann.box.x_max - rect[0], ann.box.y_max - rect[1]
                new_box = BBox(
                    x + sx_eff * ix0, y + sy_eff * iy0, x + sx_eff * ix1, y + sy_eff * iy1
                )
                op = PasteOp(
                    donor_image_id=sample.image.id,
                    donor_rect=rect,
                    transform=tf,
                    position=(x, y),
                    class_id=cls,
                    jitter_seed=derive_seed(seed, "raug-jitter", rec.id, len(pastes_per_image[ri])),
                    new_box=new_box,
                )
                pastes_per_image[ri].append(op)
                blocked[ri].append(BBox(x, y, x + aw, y + ah))
                per_image_cls[ri] += 1
                live_counts[cls] += 1
                placed = True
                break
            if placed:
                donor_idx += 1
            else:
                active.remove((si, ai))
            if active:
                donor_idx %= len(active)

    return [
        PastePlan(d.samples[ri].image.id, tuple(ops))
        for ri, ops in enumerate(pastes_per_image)
        if ops
    ]


def apply_raug(d: Dataset, k: int, seed: int) -> Dataset:
    """Execute the paste schedule: rescale, jitter and paste donor patches,
    appending one annotation per paste. Pixels outside pasted rectangles
    are untouched; a balanced dataset comes back unchanged."""
    plans = {p.recipient_image_id: p for p in plan_raug(d, k, seed)}
    if not plans:
        return d

    by_id = {s.image.id: s for s in d}
    new_samples = []
    for s in d:
        plan = plans.get(s.image.id)
        if plan is None:
            new_samples.append(s)
            continue
        pixels = s.image.pixels.copy()
        annotations = list(s.annotations)
        for op in plan.pastes:
            donor = by_id[op.donor_image_id].image
            x0, y0, x1, y1 = op.donor_rect
            patch = donor.pixels[y0:y1, x0:x1]
            ah, aw = op.transform.adjusted_dims
            if (ah, aw) != patch.shape[:2]:
                patch = np.asarray(
                    PILImage.fromarray(patch).resize((aw, ah), PILImage.BILINEAR)
                )
            patch = photometric_jitter(patch, op.jitter_seed)
            px, py = op.position
            pixels[py : py + ah, px : px + aw] = patch
            annotations.append(Annotation(op.new_box, op.class_id))
        new_samples.append(Sample(Image(s.image.id, pixels), tuple(annotations)))
    return Dataset(tuple(new_samples), d.classes, d.domain_tag)
