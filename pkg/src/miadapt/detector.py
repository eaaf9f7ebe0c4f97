"""Minimal two-stage detector: conv backbone, anchor RPN, ROI head.

The reference model is sized for CPU-scale experiments: a 4-layer
backbone with total stride 8, one anchor scale with three aspect
ratios per cell, and a small fully-connected ROI head. Parameters
live in ``ModelParams`` (named numpy arrays + JSON-able metadata) so
checkpoints, EMA updates and schema checks stay framework-agnostic;
the torch module is rebuilt from them on demand.

All losses are smooth in the parameters for a fixed proposal set
(SiLU activations, BCE/CE with logits, smooth-L1), which keeps
finite-difference gradient checks meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms, roi_align

from .data import Annotation, BBox, Dataset, Detection, Image
from .seeding import derive_rng

CHECKPOINT_VERSION = "miadapt-ckpt-1"


@dataclass(frozen=True)
class DetectorConfig:
    classes: tuple[str, ...]
    channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    anchor_size: float = 24.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)  # h/w per anchor
    pixel_mean: float = 127.5
    pixel_std: float = 64.0
    roi_pool_size: int = 4
    roi_fc_dim: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    rpn_nms_thresh: float = 0.7
    pre_nms_top_n: int = 1000
    post_nms_top_n: int = 300
    roi_train_top_n: int = 128

    # total stride of the three stride-2 convs; fixed by the architecture
    stride = 8

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        d = dict(d)
        d["classes"] = tuple(d["classes"])
        d["channels"] = tuple(d["channels"])
        d["anchor_ratios"] = tuple(d["anchor_ratios"])
        return DetectorConfig(**d)


@dataclass
class ModelParams:
    """Named parameter arrays plus metadata; the unit EMA and checkpoints
    operate on."""

    params: dict[str, np.ndarray]
    meta: dict

    def schema(self) -> tuple:
        return tuple((k, tuple(v.shape), str(v.dtype)) for k, v in self.params.items())

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.meta["classes"])

    @property
    def config(self) -> DetectorConfig:
        return DetectorConfig.from_dict(self.meta["config"])

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.params.items()}, json.loads(json.dumps(self.meta)))


@dataclass(frozen=True)
class FeatureMap:
    """Backbone output; values has shape (H', W', D) with H' = ceil(H/stride)."""

    values: torch.Tensor
    stride: int
    image_size: tuple[int, int]  # (H, W) of the input image

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.values.ndim != 3:
            raise ValueError("feature values must be (H', W', D)")
        if not torch.isfinite(self.values.detach()).all():
            raise ValueError("non-finite feature values")

    def nchw(self) -> torch.Tensor:
        return self.values.permute(2, 0, 1).unsqueeze(0)


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple[BBox, ...]
    objectness: tuple[float, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.objectness):
            raise ValueError("boxes and objectness must have equal length")
        if any(b > a for a, b in zip(self.objectness, self.objectness[1:])):
            raise ValueError("objectness must be sorted descending")

    def __len__(self) -> int:
        return len(self.boxes)

    def top(self, n: int) -> "ProposalSet":
        return ProposalSet(self.boxes[:n], self.objectness[:n])


@dataclass(frozen=True)
class LossBreakdown:
    rpn_cls: float
    rpn_loc: float
    roi_cls: float
    roi_loc: float

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_loc + self.roi_cls + self.roi_loc


class RefDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels

        def block(cin, cout, stride):
            return [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(max(1, cout // 8), cout),
                nn.SiLU(),
            ]

        self.backbone = nn.Sequential(
            *block(3, c1, 2), *block(c1, c2, 2), *block(c2, c3, 2), *block(c3, c4, 1)
        )
        a = len(cfg.anchor_ratios)
        self.rpn_conv = nn.Conv2d(c4, c4, 3, padding=1)
        self.rpn_obj = nn.Conv2d(c4, a, 1)
        self.rpn_box = nn.Conv2d(c4, 4 * a, 1)
        p = cfg.roi_pool_size
        self.roi_fc = nn.Linear(c4 * p * p, cfg.roi_fc_dim)
        self.roi_cls = nn.Linear(cfg.roi_fc_dim, cfg.num_classes + 1)  # index 0 = background
        self.roi_box = nn.Linear(cfg.roi_fc_dim, 4)
        self.to(dtype)
        self._anchor_cache: dict[tuple[int, int], torch.Tensor] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.roi_fc.weight.dtype

    def reset_parameters_seeded(self, seed: int) -> None:
        """He-normal weights, zero biases, unit norm scales — all drawn from
        named streams so init is independent of torch global RNG state."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                rng = derive_rng("detector-init", seed, name)
                if p.ndim >= 2:  # conv / linear weight
                    fan_in = int(np.prod(p.shape[1:]))
                    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(p.shape))
                    p.copy_(torch.as_tensor(w, dtype=p.dtype))
                elif isinstance(self.get_submodule(name.rsplit(".", 1)[0]), nn.GroupNorm):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.zero_()
            self.rpn_obj.bias.fill_(-2.0)  # background prior for early training

    # ---- params <-> module ----

    def to_params(self) -> ModelParams:
        arrs = {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}
        meta = {
            "version": CHECKPOINT_VERSION,
            "classes": list(self.cfg.classes),
            "pixel_mean": self.cfg.pixel_mean,
            "pixel_std": self.cfg.pixel_std,
            "config": self.cfg.to_dict(),
        }
        return ModelParams(arrs, meta)

    def load_params(self, mp: ModelParams) -> None:
        state = {k: torch.as_tensor(v, dtype=self.dtype) for k, v in mp.params.items()}
        self.load_state_dict(state)

    @classmethod
    def from_params(cls, mp: ModelParams) -> "RefDetector":
        dtype = torch.float64 if next(iter(mp.params.values())).dtype == np.float64 else torch.float32
        model = cls(mp.config, dtype=dtype)
        model.load_params(mp)
        return model

    # ---- tensor plumbing ----

    def image_tensor(self, img: Image) -> torch.Tensor:
        x = torch.as_tensor(img.pixels.copy(), dtype=self.dtype)
        x = (x - self.cfg.pixel_mean) / self.cfg.pixel_std
        return x.permute(2, 0, 1).unsqueeze(0)

    def anchors(self, hf: int, wf: int) -> torch.Tensor:
        """All anchors for an hf x wf feature map, xyxy, (hf*wf*A, 4),
        flattened in (row, col, ratio) order."""
        key = (hf, wf)
        cached = self._anchor_cache.get(key)
        if cached is not None and cached.dtype == self.dtype:
            return cached
        s = self.cfg.stride
        size = self.cfg.anchor_size
        ys = (torch.arange(hf, dtype=self.dtype) + 0.5) * s
        xs = (torch.arange(wf, dtype=self.dtype) + 0.5) * s
        shapes = torch.tensor(
            [[size / math.sqrt(r), size * math.sqrt(r)] for r in self.cfg.anchor_ratios],
            dtype=self.dtype,
        )  # (A, 2) = (w, h)
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        ctr = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)          # (hf*wf, 1, 2)
        half = (shapes / 2).reshape(1, -1, 2)                           # (1, A, 2)
        lo = ctr - half
        hi = ctr + half
        anchors = torch.cat([lo, hi], dim=-1).reshape(-1, 4)
        self._anchor_cache[key] = anchors
        return anchors

    def backbone_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def rpn_head(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened objectness logits (N,) and box deltas (N, 4) matching
        the anchor layout."""
        t = F.silu(self.rpn_conv(feat))
        a = len(self.cfg.anchor_ratios)
        obj = self.rpn_obj(t)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.rpn_box(t)[0].reshape(a, 4, feat.shape[2], feat.shape[3])
        deltas = deltas.permute(2, 3, 0, 1).reshape(-1, 4)
        return obj, deltas

    def roi_head(self, feat: torch.Tensor, boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Class logits (K, C+1) and class-agnostic box deltas (K, 4)."""
        if boxes.numel() == 0:
            z = feat.new_zeros((0, self.cfg.num_classes + 1))
            return z, feat.new_zeros((0, 4))
        idx = torch.cat([boxes.new_zeros(len(boxes), 1), boxes], dim=1)
        pooled = roi_align(
            feat, idx, output_size=self.cfg.roi_pool_size,
            spatial_scale=1.0 / self.cfg.stride, sampling_ratio=2, aligned=True,
        )
        h = F.silu(self.roi_fc(pooled.flatten(1)))
        return self.roi_cls(h), self.roi_box(h)

    def propose_t(self, feat: torch.Tensor, image_hw: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Decoded, clipped, NMS-filtered proposals and their objectness,
        sorted descending. Detached from the graph."""
        with torch.no_grad():
            obj, deltas = self.rpn_head(feat)
            anchors = self.anchors(feat.shape[2], feat.shape[3])
            scores = torch.sigmoid(obj)
            boxes = decode_boxes(deltas, anchors)
            boxes = clip_boxes(boxes, image_hw)
            wh = boxes[:, 2:] - boxes[:, :2]
            keep = (wh >= 1.0).all(dim=1)
            boxes, scores = boxes[keep], scores[keep]
            if len(scores) > self.cfg.pre_nms_top_n:
                scores, order = torch.topk(scores, self.cfg.pre_nms_top_n)
                boxes = boxes[order]
            keep = nms(boxes.float(), scores.float(), self.cfg.rpn_nms_thresh)
            keep = keep[: self.cfg.post_nms_top_n]
            return boxes[keep], scores[keep]


def decode_boxes(deltas: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Standard (dx, dy, dw, dh) parameterization relative to reference boxes."""
    w = ref[:, 2] - ref[:, 0]
    h = ref[:, 3] - ref[:, 1]
    cx = ref[:, 0] + 0.5 * w
    cy = ref[:, 1] + 0.5 * h
    dx, dy, dw, dh = deltas.unbind(dim=1)
    px = cx + dx * w
    py = cy + dy * h
    pw = w * torch.exp(dw.clamp(max=4.0))
    ph = h * torch.exp(dh.clamp(max=4.0))
    return torch.stack([px - 0.5 * pw, py - 0.5 * ph, px + 0.5 * pw, py + 0.5 * ph], dim=1)


def encode_boxes(boxes: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    w = ref[:, 2] - ref[:, 0]
    h = ref[:, 3] - ref[:, 1]
    cx = ref[:, 0] + 0.5 * w
    cy = ref[:, 1] + 0.5 * h
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return torch.stack(
        [(bcx - cx) / w, (bcy - cy) / h, torch.log(bw / w), torch.log(bh / h)], dim=1
    )


def clip_boxes(boxes: torch.Tensor, image_hw: tuple[int, int]) -> torch.Tensor:
    h, w = image_hw
    x0 = boxes[:, 0].clamp(0.0, w)
    y0 = boxes[:, 1].clamp(0.0, h)
    x1 = boxes[:, 2].clamp(0.0, w)
    y1 = boxes[:, 3].clamp(0.0, h)
    return torch.stack([x0, y0, x1, y1], dim=1)


def boxes_to_tensor(boxes, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if len(boxes) == 0:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def tensor_to_boxes(t: torch.Tensor) -> list[BBox]:
    return [BBox(*(float(v) for v in row)) for row in t.detach().cpu().tolist()]


def _as_model(p: ModelParams | RefDetector) -> RefDetector:
    return p if isinstance(p, RefDetector) else RefDetector.from_params(p)


# ---- public operations ----


def forward_backbone(p: ModelParams | RefDetector, img: Image) -> FeatureMap:
    model = _as_model(p)
    s = model.cfg.stride
    if img.height < s or img.width < s:
        raise ValueError(f"image {img.id!r} smaller than stride {s}")
    with torch.no_grad():
        feat = model.backbone_features(model.image_tensor(img))
    return FeatureMap(feat[0].permute(1, 2, 0), s, (img.height, img.width))


def propose(p: ModelParams | RefDetector, fm: FeatureMap) -> ProposalSet:
    model = _as_model(p)
    boxes_t, scores_t = model.propose_t(fm.nchw(), fm.image_size)
    return ProposalSet(tuple(tensor_to_boxes(boxes_t)), tuple(float(s) for s in scores_t))


def roi_predict(
    p: ModelParams | RefDetector, fm: FeatureMap, boxes: list[BBox]
) -> tuple[np.ndarray, list[BBox]]:
    """Class logits over C+1 (background first) and one refined box per input box."""
    model = _as_model(p)
    with torch.no_grad():
        boxes_t = boxes_to_tensor(boxes, model.dtype)
        logits, deltas = model.roi_head(fm.nchw(), boxes_t)
        refined = clip_boxes(decode_boxes(deltas, boxes_t), fm.image_size) if len(boxes) else boxes_t
    return logits.numpy(), tensor_to_boxes(refined)


def detect(
    p: ModelParams | RefDetector,
    img: Image,
    score_thresh: float = 0.5,
    nms_thresh: float = 0.5,
    max_detections: int = 100,
) -> list[Detection]:
    """Full inference: propose, classify, per-class threshold + NMS."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    model = _as_model(p)
    fm = forward_backbone(model, img)
    proposals = propose(model, fm)
    if len(proposals) == 0:
        return []
    with torch.no_grad():
        boxes_t = boxes_to_tensor(proposals.boxes, model.dtype)
        logits, deltas = model.roi_head(fm.nchw(), boxes_t)
        refined = clip_boxes(decode_boxes(deltas, boxes_t), fm.image_size)
        probs = torch.softmax(logits, dim=1)
        out: list[Detection] = []
        wh = refined[:, 2:] - refined[:, :2]
        valid = (wh > 0.0).all(dim=1)
        for c in range(1, model.cfg.num_classes + 1):
            sc = probs[:, c]
            keep = (sc >= score_thresh) & valid
            if not keep.any():
                continue
            b, s = refined[keep], sc[keep]
            order = nms(b.float(), s.float(), nms_thresh)
            for i in order.tolist():
                out.append(Detection(BBox(*(float(v) for v in b[i])), c, float(s[i])))
    out.sort(key=lambda d: -d.confidence)
    return out[:max_detections]


def _match_rpn(model: RefDetector, anchors: torch.Tensor, gt_boxes: torch.Tensor):
    """Anchor labels: 1 positive, 0 negative, -1 ignored; plus matched gt index."""
    n = len(anchors)
    labels = torch.full((n,), -1, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if len(gt_boxes) == 0:
        return torch.zeros(n, dtype=torch.long), matched  # all negative
    ious = box_iou(anchors.float(), gt_boxes.float())
    max_iou, argmax = ious.max(dim=1)
    labels[max_iou <= model.cfg.rpn_neg_iou] = 0
    labels[max_iou >= model.cfg.rpn_pos_iou] = 1
    best_per_gt = ious.max(dim=0).values
    force = (ious == best_per_gt.unsqueeze(0)) & (best_per_gt.unsqueeze(0) > 0)
    labels[force.any(dim=1)] = 1
    matched = argmax
    return labels, matched


def _detection_loss_t(
    model: RefDetector,
    img: Image,
    gt: list[Annotation],
    proposals_t: torch.Tensor | None = None,
    feat: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Differentiable loss components. Proposals are treated as constants
    (no gradient flows through box coordinates), matching standard
    two-stage training. Pass ``feat`` to reuse an existing backbone pass."""
    if feat is None:
        feat = model.backbone_features(model.image_tensor(img))
    image_hw = (img.height, img.width)
    gt_boxes = boxes_to_tensor([a.box for a in gt], model.dtype)
    gt_labels = torch.tensor([a.class_id for a in gt], dtype=torch.long)

    obj, deltas = model.rpn_head(feat)
    anchors = model.anchors(feat.shape[2], feat.shape[3])
    labels, matched = _match_rpn(model, anchors, gt_boxes)
    pos = labels == 1
    neg = labels == 0
    zero = obj.sum() * 0.0

    parts = {}
    if pos.any() and neg.any():
        parts["rpn_cls"] = 0.5 * (
            F.binary_cross_entropy_with_logits(obj[pos], torch.ones_like(obj[pos]))
            + F.binary_cross_entropy_with_logits(obj[neg], torch.zeros_like(obj[neg]))
        )
    elif neg.any():
        parts["rpn_cls"] = F.binary_cross_entropy_with_logits(obj[neg], torch.zeros_like(obj[neg]))
    else:
        parts["rpn_cls"] = F.binary_cross_entropy_with_logits(obj[pos], torch.ones_like(obj[pos]))

    if pos.any():
        targets = encode_boxes(gt_boxes[matched[pos]], anchors[pos])
        parts["rpn_loc"] = F.smooth_l1_loss(deltas[pos], targets, beta=1.0)
    else:
        parts["rpn_loc"] = zero

    if proposals_t is None:
        boxes_t, _ = model.propose_t(feat, image_hw)
        boxes_t = boxes_t[: model.cfg.roi_train_top_n]
    else:
        boxes_t = proposals_t.to(model.dtype)
    if len(gt_boxes):
        boxes_t = torch.cat([boxes_t, gt_boxes], dim=0)  # GT as extra training rois
    boxes_t = boxes_t.detach()

    logits, roi_deltas = model.roi_head(feat, boxes_t)
    if len(boxes_t) == 0:
        parts["roi_cls"] = zero
        parts["roi_loc"] = zero
        return parts

    if len(gt_boxes):
        ious = box_iou(boxes_t.float(), gt_boxes.float())
        max_iou, argmax = ious.max(dim=1)
        fg = max_iou >= model.cfg.roi_pos_iou
        roi_labels = torch.where(fg, gt_labels[argmax], torch.zeros_like(argmax))
    else:
        fg = torch.zeros(len(boxes_t), dtype=torch.bool)
        roi_labels = torch.zeros(len(boxes_t), dtype=torch.long)

    bg = ~fg
    if fg.any() and bg.any():
        parts["roi_cls"] = 0.5 * (
            F.cross_entropy(logits[fg], roi_labels[fg]) + F.cross_entropy(logits[bg], roi_labels[bg])
        )
    elif fg.any():
        parts["roi_cls"] = F.cross_entropy(logits[fg], roi_labels[fg])
    else:
        parts["roi_cls"] = F.cross_entropy(logits[bg], roi_labels[bg])

    if fg.any():
        targets = encode_boxes(gt_boxes[argmax[fg]], boxes_t[fg])
        parts["roi_loc"] = F.smooth_l1_loss(roi_deltas[fg], targets, beta=1.0)
    else:
        parts["roi_loc"] = zero
    return parts


def detection_loss(
    p: ModelParams | RefDetector,
    img: Image,
    gt: list[Annotation],
    proposals: list[BBox] | None = None,
) -> LossBreakdown:
    """Two-stage detection loss; pass ``proposals`` to pin the ROI box set
    (the default recomputes RPN proposals for this image)."""
    model = _as_model(p)
    proposals_t = None if proposals is None else boxes_to_tensor(proposals, model.dtype)
    with torch.no_grad():
        parts = _detection_loss_t(model, img, gt, proposals_t)
    return LossBreakdown(**{k: float(v) for k, v in parts.items()})


# ---- source training ----


@dataclass(frozen=True)
class TrainConfig:
    detector: DetectorConfig
    learning_rate: float = 0.02
    momentum: float = 0.9
    steps: int = 2000
    lr_decay_at: float = 0.75  # fraction of steps after which lr drops 10x
    seed: int = 0
    log_every: int = 50


def train_source(data: Dataset, cfg: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Train the reference detector from scratch on the source domain."""
    if len(data) == 0:
        raise ValueError("empty training dataset")
    model = RefDetector(cfg.detector)
    model.reset_parameters_seeded(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    decay_step = int(cfg.steps * cfg.lr_decay_at)

    log: list[dict] = []
    order: list[int] = []
    epoch = 0
    for step in range(cfg.steps):
        if not order:
            order = list(derive_rng(cfg.seed, "source-shuffle", epoch).permutation(len(data)))
            epoch += 1
        sample = data.samples[order.pop()]
        if step == decay_step:
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * 0.1
        parts = _detection_loss_t(model, sample.image, list(sample.annotations))
        total = sum(parts.values())
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = {"step": step, **{k: float(v) for k, v in parts.items()}, "total": float(total)}
            log.append(rec)
    return model.to_params(), log


# ---- checkpoint container ----


def save_checkpoint(mp: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_blob = np.frombuffer(json.dumps(mp.meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, _meta=meta_blob, **mp.params)


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["_meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION!r}"
            )
        params = {k: z[k].copy() for k in z.files if k != "_meta"}
    return ModelParams(params, meta)
