"""Mean-teacher adaptation of a source detector to a k-shot target set.

Three methods share one loop:

* ``faster-freeshot`` — plain fine-tuning of a single network on the
  detection loss.
* ``mt-freeshot`` — student/teacher pair, both initialized from the
  source checkpoint; the student adds a KL consistency term against the
  teacher, the teacher follows by per-step EMA.
* ``miadapt`` — mt-freeshot plus rare-class copy-paste augmentation and
  the category-alignment losses, weighted by alpha and beta.

The adapted teacher of the final epoch is returned (the single network
for faster-freeshot). Weak/strong augmentations are photometric only,
so box geometry is shared between the two branches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, Image
from .detector import (
    FeatureMap,
    ModelParams,
    RefDetector,
    _detection_loss_t,
    boxes_to_tensor,
    forward_backbone,
    propose,
)
from .catalign import assign_classes, build_feature_bank, dis_loss, sim_loss
from .raug import apply_raug, photometric_jitter
from .seeding import derive_rng, derive_seed

METHODS = ("faster-freeshot", "mt-freeshot", "miadapt")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "miadapt"
    epochs: int = 10
    eta: float = 0.9           # teacher EMA rate
    n_r: int = 300             # teacher proposals kept per image
    alpha: float = 1.0         # similarity loss weight
    beta: float = 1.0          # dissimilarity loss weight
    margin: float = 1.0
    learning_rate: float = 0.02
    seed: int = 0
    use_raug: bool | None = None  # defaults to True only for miadapt

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.n_r < 1 or self.epochs < 1:
            raise ValueError("n_r and epochs must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0.0 <= self.margin <= 2.0:
            raise ValueError("margin must lie in [0, 2]")
        if self.use_raug is None:
            object.__setattr__(self, "use_raug", self.method == "miadapt")


@dataclass(frozen=True)
class AugmentedPair:
    weak: Image
    strong: Image


def augment_pair(img: Image, seed: int) -> AugmentedPair:
    """Weak: mild global intensity scale. Strong: photometric jitter plus
    occasional grayscale conversion and additive Gaussian noise. Neither
    branch moves any pixel, so annotations stay valid for both."""
    rng = np.random.default_rng(seed)
    px = img.pixels.astype(np.float64)

    weak = np.clip(np.rint(px * rng.uniform(0.95, 1.05)), 0, 255).astype(np.uint8)

    strong = photometric_jitter(img.pixels, int(rng.integers(2**62)))
    if rng.random() < 0.2:
        gray = np.rint(strong @ np.array([0.299, 0.587, 0.114])).astype(np.uint8)
        strong = np.repeat(gray[:, :, None], 3, axis=2)
    if rng.random() < 0.3:
        noise = rng.normal(0.0, 8.0, size=strong.shape)
        strong = np.clip(np.rint(strong.astype(np.float64) + noise), 0, 255).astype(np.uint8)

    return AugmentedPair(Image(img.id, weak), Image(img.id, strong))


def ema_update(teacher: ModelParams, student: ModelParams, eta: float) -> ModelParams:
    """Element-wise eta * teacher + (1 - eta) * student; metadata from the teacher."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if teacher.schema() != student.schema():
        raise ValueError("teacher/student parameter schemas differ")
    eta = float(eta)
    merged = {k: eta * teacher.params[k] + (1.0 - eta) * student.params[k] for k in teacher.params}
    return ModelParams(merged, json.loads(json.dumps(teacher.meta)))


def consistency_loss(student_logits, teacher_logits):
    """Row-wise KL(softmax(student) || softmax(teacher)), averaged over rows.
    The teacher side is detached; returns a float for array inputs and a
    graph tensor for tensor inputs."""
    as_array = not isinstance(student_logits, torch.Tensor)
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits)
    if s.shape != t.shape or s.ndim != 2 or len(s) < 1:
        raise ValueError(f"logit shapes must match and be n x c, got {tuple(s.shape)} vs {tuple(t.shape)}")
    log_p = F.log_softmax(s, dim=1)
    log_q = F.log_softmax(t.detach(), dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
    return float(kl) if as_array else kl


def _ema_step_(teacher: RefDetector, student: RefDetector, eta: float) -> None:
    # same expression as ema_update so torch and numpy paths agree bitwise
    with torch.no_grad():
        for t_p, s_p in zip(teacher.parameters(), student.parameters()):
            t_p.copy_(eta * t_p + (1.0 - eta) * s_p)


def run_adaptation(
    source_ckpt: ModelParams,
    target_kshot: Dataset,
    cfg: AdaptConfig,
    shots: int | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Adapt the source checkpoint on the k-shot target set; returns the
    last-epoch teacher parameters (the single network for faster-freeshot)
    and a per-step loss log."""
    if len(target_kshot) == 0:
        raise ValueError("empty target dataset")
    data = target_kshot
    if cfg.use_raug:
        data = apply_raug(data, shots or 0, derive_seed(cfg.seed, "raug"))

    student = RefDetector.from_params(source_ckpt)
    teacher = None
    if cfg.method != "faster-freeshot":
        teacher = RefDetector.from_params(source_ckpt)
        teacher.requires_grad_(False)
    use_cl = cfg.method == "miadapt" and (cfg.alpha > 0 or cfg.beta > 0)

    opt = torch.optim.SGD(student.parameters(), lr=cfg.learning_rate)
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "adapt-shuffle", epoch).permutation(len(data))
        for idx in order:
            sample = data.samples[int(idx)]
            gt = list(sample.annotations)
            pair = augment_pair(
                sample.image, derive_seed(cfg.seed, "adapt-aug", sample.image.id, step)
            )

            feat = student.backbone_features(student.image_tensor(pair.strong))
            parts = _detection_loss_t(student, pair.strong, gt, feat=feat)
            l_det = sum(parts.values())
            zero = torch.zeros(())
            l_dl = l_sim = l_dis = zero

            if teacher is not None:
                t_fm = forward_backbone(teacher, pair.weak)
                props = propose(teacher, t_fm).top(cfg.n_r)
                if len(props) > 0:
                    boxes_t = boxes_to_tensor(props.boxes, student.dtype)
                    with torch.no_grad():
                        t_logits, _ = teacher.roi_head(t_fm.nchw(), boxes_t)
                    s_logits, _ = student.roi_head(feat, boxes_t)
                    l_dl = consistency_loss(s_logits, t_logits)

                if use_cl:
                    s_fm = FeatureMap(
                        feat[0].permute(1, 2, 0), student.cfg.stride, (pair.strong.height, pair.strong.width)
                    )
                    bank = build_feature_bank(s_fm, assign_classes(props, gt, 0.5))
                    l_sim = sim_loss(bank)
                    l_dis = dis_loss(bank, cfg.margin)

            total = l_det + l_dl + cfg.alpha * l_sim + cfg.beta * l_dis
            opt.zero_grad()
            total.backward()
            opt.step()
            if teacher is not None:
                _ema_step_(teacher, student, cfg.eta)

            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    **{k: float(v) for k, v in parts.items()},
                    "l_det": float(l_det),
                    "l_dl": float(l_dl),
                    "l_sim": float(l_sim),
                    "l_dis": float(l_dis),
                    "total": float(total),
                }
            )
            step += 1

    final = teacher if teacher is not None else student
    return final.to_params(), log
