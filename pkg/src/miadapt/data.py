"""Detection data types, annotation manifest I/O and box geometry.

Boxes use continuous half-open pixel coordinates with the origin at the
top-left: a box covers [x_min, x_max) x [y_min, y_max), so its area is
(x_max - x_min) * (y_max - y_min) with no +1 correction. Class ids are
1-based; id 0 is reserved for the detector-internal background class.

The on-disk format is one JSON manifest per dataset plus one PNG per
image::

    {"classes": ["a", "b"],
     "domain_tag": "source",
     "images": [{"id": "img0", "file": "img0.png",
                 "width": 128, "height": 128,
                 "annotations": [{"class_id": 1,
                                  "box": [x_min, y_min, x_max, y_max]}]}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class ManifestError(ValueError):
    """Raised when a dataset manifest violates the annotation schema."""


def _freeze(pixels: np.ndarray) -> np.ndarray:
    pixels = np.ascontiguousarray(pixels)
    pixels.flags.writeable = False
    return pixels


@dataclass(frozen=True)
class Image:
    """An RGB image with a unique id. Pixels are read-only uint8 HxWx3."""

    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"image {self.id!r}: pixels must be HxWx3 uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image {self.id!r}: empty image")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, half-open continuous coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def clipped(self, width: float, height: float) -> "BBox":
        """Clip to image bounds; raises if nothing is left."""
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            max(min(self.x_max, width), 0.0),
            max(min(self.y_max, height), 0.0),
        )


@dataclass(frozen=True)
class Annotation:
    box: BBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Sample:
    """One image together with its ground-truth annotations."""

    image: Image
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    classes: tuple[str, ...]
    domain_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "classes", tuple(self.classes))
        seen: set[str] = set()
        for s in self.samples:
            if s.image.id in seen:
                raise ManifestError(f"duplicate image id {s.image.id!r}")
            seen.add(s.image.id)
            for a in s.annotations:
                if not 1 <= a.class_id <= len(self.classes):
                    raise ManifestError(
                        f"image {s.image.id!r}: class_id {a.class_id} outside 1..{len(self.classes)}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def class_histogram(d: Dataset) -> dict[int, int]:
    """Instance count per class id; classes without instances count 0."""
    counts = {c: 0 for c in range(1, d.num_classes + 1)}
    for s in d:
        for a in s.annotations:
            counts[a.class_id] += 1
    return counts


def _parse_box(raw, image_id: str, width: int, height: int) -> BBox:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise ManifestError(f"image {image_id!r}: box must be [x_min, y_min, x_max, y_max], got {raw!r}")
    x0, y0, x1, y1 = (float(v) for v in raw)
    # boxes poking past the border (e.g. from augmentation) are clipped, then validated
    x0, y0 = min(max(x0, 0.0), width), min(max(y0, 0.0), height)
    x1, y1 = max(min(x1, width), 0.0), max(min(y1, height), 0.0)
    if not (x0 < x1 and y0 < y1):
        raise ManifestError(f"image {image_id!r}: box {raw} degenerate after clipping to {width}x{height}")
    return BBox(x0, y0, x1, y1)


def load_dataset(path: str | Path) -> Dataset:
    """Read a manifest plus the PNGs it references into a validated Dataset."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc

    for key in ("classes", "images"):
        if key not in doc:
            raise ManifestError(f"{path}: missing top-level key {key!r}")
    classes = tuple(str(c) for c in doc["classes"])
    if not classes:
        raise ManifestError(f"{path}: empty class list")

    root = path.parent
    samples = []
    for entry in doc["images"]:
        image_id = str(entry.get("id", "<missing id>"))
        for key in ("id", "file", "width", "height", "annotations"):
            if key not in entry:
                raise ManifestError(f"image {image_id!r}: missing key {key!r}")
        png = root / entry["file"]
        if not png.is_file():
            raise FileNotFoundError(f"image {image_id!r}: file not found: {png}")
        pixels = np.asarray(PILImage.open(png).convert("RGB"), dtype=np.uint8)
        h, w = pixels.shape[:2]
        if (w, h) != (int(entry["width"]), int(entry["height"])):
            raise ManifestError(
                f"image {image_id!r}: file is {w}x{h} but manifest says "
                f"{entry['width']}x{entry['height']}"
            )
        annotations = []
        for raw in entry["annotations"]:
            cid = int(raw.get("class_id", 0))
            if not 1 <= cid <= len(classes):
                raise ManifestError(f"image {image_id!r}: class_id {cid} outside 1..{len(classes)}")
            annotations.append(Annotation(_parse_box(raw.get("box"), image_id, w, h), cid))
        samples.append(Sample(Image(image_id, pixels), tuple(annotations)))
    return Dataset(tuple(samples), classes, str(doc.get("domain_tag", "")))


def save_dataset(d: Dataset, out_dir: str | Path, manifest_name: str = "manifest.json") -> Path:
    """Write PNGs and a manifest under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in d:
        fname = f"{s.image.id}.png"
        PILImage.fromarray(s.image.pixels).save(out_dir / fname)
        entries.append(
            {
                "id": s.image.id,
                "file": fname,
                "width": s.image.width,
                "height": s.image.height,
                "annotations": [
                    {"class_id": a.class_id, "box": list(a.box.as_tuple())} for a in s.annotations
                ],
            }
        )
    manifest = {"classes": list(d.classes), "domain_tag": d.domain_tag, "images": entries}
    out_path = out_dir / manifest_name
    with open(out_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out_path
