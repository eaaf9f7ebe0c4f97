"""Category-aware feature alignment.

Stable boxes are mined from the teacher (top objectness proposals),
labeled by IoU against ground truth, merged with the ground truth
itself, and pooled into per-class feature vectors from the student
backbone. Two cosine losses act on the pooled vectors: an intra-class
similarity term over proposal pairs and an inter-class margin term
over class means.

Loss functions accept banks of numpy or torch vectors and return a
torch scalar, so they can sit directly in a training graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .data import Annotation, BBox, Image, iou
from .detector import FeatureMap, ModelParams, ProposalSet, RefDetector, forward_backbone, propose

ORIGIN_PROPOSAL = "teacher-proposal"
ORIGIN_GT = "ground-truth"

_ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LabeledRegion:
    box: BBox
    class_id: int
    origin: str

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("background regions are never stored")
        if self.origin not in (ORIGIN_PROPOSAL, ORIGIN_GT):
            raise ValueError(f"unknown origin {self.origin!r}")


class ClassFeatureBank:
    """Per-class lists of pooled feature vectors; vectors are
    unit-normalized whenever they are read back out."""

    def __init__(self):
        self._vectors: dict[int, list[torch.Tensor]] = {}

    def add(self, class_id: int, vec) -> None:
        v = torch.as_tensor(vec)
        if v.ndim != 1:
            raise ValueError("feature vectors must be 1-d")
        self._vectors.setdefault(int(class_id), []).append(v)

    def class_ids(self) -> list[int]:
        return sorted(self._vectors)

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self._vectors.items())}

    def normalized(self, class_id: int) -> torch.Tensor:
        """(N_c, D) matrix of unit vectors; rejects zero-norm features."""
        vecs = torch.stack(self._vectors[class_id])
        norms = torch.linalg.vector_norm(vecs, dim=1, keepdim=True)
        if (norms <= _ZERO_NORM_EPS).any():
            raise ValueError(f"zero-norm feature vector in class {class_id}")
        return vecs / norms

    def class_means(self) -> dict[int, torch.Tensor]:
        """Mean of the unit-normalized vectors per class."""
        return {c: self.normalized(c).mean(dim=0) for c in self.class_ids()}


def mine_proposals(teacher: ModelParams | RefDetector, weak_img: Image, n_r: int) -> ProposalSet:
    """Teacher proposals on the weakly augmented image, top n_r by objectness."""
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    fm = forward_backbone(teacher, weak_img)
    return propose(teacher, fm).top(n_r)


def assign_classes(
    proposals: ProposalSet, gt: list[Annotation], iou_thresh: float = 0.5
) -> list[LabeledRegion]:
    """Label each proposal with the class of its max-IoU ground-truth box
    (discarded below the threshold), then append the ground truth itself."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    regions: list[LabeledRegion] = []
    for box in proposals.boxes:
        best_iou, best = 0.0, -1
        for gi, ann in enumerate(gt):
            v = iou(box, ann.box)
            if v > best_iou:  # strict: ties keep the lowest gt index
                best_iou, best = v, gi
        if best >= 0 and best_iou >= iou_thresh:
            regions.append(LabeledRegion(box, gt[best].class_id, ORIGIN_PROPOSAL))
    for ann in gt:
        regions.append(LabeledRegion(ann.box, ann.class_id, ORIGIN_GT))
    return regions


def pool_features(fm: FeatureMap, box: BBox) -> torch.Tensor:
    """Channel-wise mean over feature cells whose centers fall inside the
    box (mapped by the stride); the single nearest cell when none do."""
    s = float(fm.stride)
    hf, wf = fm.values.shape[:2]
    x0, y0, x1, y1 = (box.x_min / s, box.y_min / s, box.x_max / s, box.y_max / s)
    j0, j1 = math.ceil(x0 - 0.5), math.ceil(x1 - 0.5) - 1
    i0, i1 = math.ceil(y0 - 0.5), math.ceil(y1 - 0.5) - 1
    if j0 > j1 or i0 > i1:
        j = min(max(math.floor((x0 + x1) / 2), 0), wf - 1)
        i = min(max(math.floor((y0 + y1) / 2), 0), hf - 1)
        return fm.values[i, j]
    j0, j1 = max(j0, 0), min(j1, wf - 1)
    i0, i1 = max(i0, 0), min(i1, hf - 1)
    return fm.values[i0 : i1 + 1, j0 : j1 + 1].mean(dim=(0, 1))


def build_feature_bank(
    fm: FeatureMap, regions: list[LabeledRegion], min_norm: float = 1e-8
) -> ClassFeatureBank:
    """Pool one feature vector per labeled region; vectors with vanishing
    norm carry no direction and are dropped."""
    bank = ClassFeatureBank()
    for r in regions:
        v = pool_features(fm, r.box)
        if float(torch.linalg.vector_norm(v.detach())) > min_norm:
            bank.add(r.class_id, v)
    return bank


def sim_loss(bank: ClassFeatureBank) -> torch.Tensor:
    """Mean over classes (with >= 2 vectors) of the mean squared cosine
    gap (1 - cos)^2 over distinct vector pairs; 0 without any pair."""
    terms = []
    for c in bank.class_ids():
        if bank.counts()[c] < 2:
            continue
        v = bank.normalized(c)
        cos = v @ v.T
        idx = torch.triu_indices(len(v), len(v), offset=1)
        terms.append(((1.0 - cos[idx[0], idx[1]]) ** 2).mean())
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).mean()


def dis_loss(bank: ClassFeatureBank, margin: float = 1.0) -> torch.Tensor:
    """Margin penalty on class-mean affinity: dis = 1 + cos of the class
    means, squared hinge at the margin, averaged over class pairs."""
    if not 0.0 <= margin <= 2.0:
        raise ValueError("margin must lie in [0, 2]")
    means = bank.class_means()
    ids = sorted(means)
    if len(ids) < 2:
        return torch.zeros(())
    unit = []
    for c in ids:
        n = torch.linalg.vector_norm(means[c])
        if float(n) <= _ZERO_NORM_EPS:
            raise ValueError(f"zero-norm class mean for class {c}")
        unit.append(means[c] / n)
    terms = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            dis = 1.0 + (unit[a] * unit[b]).sum()
            terms.append(torch.clamp(dis - margin, min=0.0) ** 2)
    return torch.stack(terms).mean()
