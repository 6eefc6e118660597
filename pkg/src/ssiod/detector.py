"""A small two-stage detector: backbone -> region proposals -> RoI head.

The backbone maps an image to a stride-8 feature map, the RPN scores and
refines one anchor scale with three aspect ratios per feature cell, and the
RoI head classifies 4x4 RoIAligned crops into ``num_classes + 1`` classes
(background last) with class-specific box refinement.

Proposals are treated as constants by every loss (they are selected without
gradient), as in Faster R-CNN.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .dataset import ImageSample, LabelledSample
from .geometry import Box, Detection, nms_indices

CHECKPOINT_SCHEMA = 1
_DELTA_CLAMP = math.log(1000.0 / 16)
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 8
    image_size: int = 64
    channels: int = 32
    stride: int = 8
    anchor_size: float = 24.0
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_top_n: int = 96
    post_nms_top_k: int = 32
    rpn_nms_threshold: float = 0.7
    roi_size: int = 4
    hidden: int = 128
    det_nms_threshold: float = 0.5
    max_detections: int = 100
    anchor_pos_iou: float = 0.5
    anchor_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    focal_gamma: float = 2.0
    # per-channel input normalisation; defaults are the default synthetic scenes' statistics
    pixel_mean: tuple[float, float, float] = (0.28, 0.26, 0.24)
    pixel_std: tuple[float, float, float] = (0.24, 0.20, 0.20)

    def __post_init__(self):
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} is not a multiple of stride {self.stride}")
        if self.stride != 8:
            raise ValueError("the backbone has a fixed stride of 8")
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3 or min(self.pixel_std) <= 0:
            raise ValueError("pixel_mean and pixel_std need 3 channels with positive std")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors(self) -> int:
        return len(self.aspect_ratios)


@dataclass
class FeatureMap:
    values: torch.Tensor  # (C, H, W)
    stride: int


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass
class LossBreakdown:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total")}


class Backbone(nn.Sequential):
    def __init__(self, channels: int):
        super().__init__(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1),
            nn.SiLU(),
        )


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, feats):
        h = F.silu(self.conv(feats))
        b = feats.shape[0]
        # (B, A, H, W) -> (B, H*W*A), anchor order (y, x, a)
        obj = self.objectness(h).permute(0, 2, 3, 1).reshape(b, -1)
        d = self.deltas(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, d


class RoIHead(nn.Module):
    def __init__(self, channels: int, roi_size: int, hidden: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(channels * roi_size * roi_size, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4 * num_classes)

    def forward(self, crops):
        h = F.silu(self.fc(crops.flatten(1)))
        return self.cls(h), self.reg(h).view(-1, self.num_classes, 4)


class Detector(nn.Module):
    """Parameters split into ``backbone`` / ``rpn`` / ``roi_head``.

    ``forward_count`` counts batched backbone evaluations; the training loops
    read it to account for model forwards per role.
    """

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.channels)
        self.rpn = RPNHead(config.channels, config.num_anchors)
        self.roi_head = RoIHead(config.channels, config.roi_size, config.hidden, config.num_classes)
        self.register_buffer("anchors", make_anchors(config), persistent=False)
        self.register_buffer("pixel_mean", torch.tensor(config.pixel_mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.pixel_std).view(1, 3, 1, 1), persistent=False)
        self.forward_count = 0

    @property
    def background(self) -> int:
        return self.config.num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.forward_count += 1
        return self.backbone((x - self.pixel_mean) / self.pixel_std)


def make_anchors(config: DetectorConfig) -> torch.Tensor:
    n, s = config.feature_size, config.stride
    rows = []
    for y in range(n):
        for x in range(n):
            cx, cy = (x + 0.5) * s, (y + 0.5) * s
            for r in config.aspect_ratios:
                w = config.anchor_size / math.sqrt(r)
                h = config.anchor_size * math.sqrt(r)
                rows.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return torch.tensor(rows, dtype=torch.float32)


def build_detector(config: DetectorConfig = DetectorConfig(), seed: int = 0, dtype=torch.float32) -> Detector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(config)
    return model.to(dtype)


def clone_detector(model: Detector) -> Detector:
    return copy.deepcopy(model)


def parameter_groups(model: Detector) -> dict[str, list[nn.Parameter]]:
    return {
        "backbone": list(model.backbone.parameters()),
        "rpn": list(model.rpn.parameters()),
        "roi": list(model.roi_head.parameters()),
    }


# ---------------------------------------------------------------------------
# box coding


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack(
        [wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1
    )


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[..., 2] - ref[..., 0], ref[..., 3] - ref[..., 1]
    rx, ry = ref[..., 0] + 0.5 * rw, ref[..., 1] + 0.5 * rh
    dx, dy = deltas[..., 0] / wx, deltas[..., 1] / wy
    dw = (deltas[..., 2] / ww).clamp(max=_DELTA_CLAMP)
    dh = (deltas[..., 3] / wh).clamp(max=_DELTA_CLAMP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def clip_boxes(boxes: torch.Tensor, size: int) -> torch.Tensor:
    return boxes.clamp(min=0.0, max=float(size))


# ---------------------------------------------------------------------------
# forward passes


def images_to_tensor(images: Sequence, config: DetectorConfig, dtype=torch.float32) -> torch.Tensor:
    arrs = []
    for im in images:
        px = im.pixels if isinstance(im, ImageSample) else im
        px = np.asarray(px)
        if px.shape[:2] != (config.image_size, config.image_size):
            raise ValueError(f"image of shape {px.shape} does not match the {config.image_size}px input size")
        arrs.append(px)
    x = torch.from_numpy(np.stack(arrs).astype(np.float32, copy=False))
    return x.permute(0, 3, 1, 2).contiguous().to(dtype)


@dataclass
class ForwardPass:
    images: torch.Tensor
    features: torch.Tensor
    objectness: torch.Tensor  # (B, N) logits
    rpn_deltas: torch.Tensor  # (B, N, 4)
    proposals: list[torch.Tensor]  # per image (K, 4), no grad
    proposal_scores: list[torch.Tensor]


def run_model(model: Detector, x: torch.Tensor, proposals: Optional[list[torch.Tensor]] = None) -> ForwardPass:
    """Backbone + RPN. ``proposals`` overrides the RPN's own selection."""
    feats = model.features(x)
    obj, deltas = model.rpn(feats)
    if proposals is None:
        proposals, scores = select_proposals(model, obj, deltas)
    else:
        scores = [torch.ones(len(p), dtype=x.dtype) for p in proposals]
    return ForwardPass(x, feats, obj, deltas, proposals, scores)


@torch.no_grad()
def select_proposals(model: Detector, obj: torch.Tensor, deltas: torch.Tensor):
    cfg = model.config
    anchors = model.anchors.to(deltas.dtype)
    boxes_all = clip_boxes(decode_boxes(anchors[None], deltas, RPN_BOX_WEIGHTS), cfg.image_size)
    scores_all = torch.sigmoid(obj)
    out_boxes, out_scores = [], []
    for boxes, scores in zip(boxes_all, scores_all):
        wh = boxes[:, 2:] - boxes[:, :2]
        valid = (wh >= 1.0).all(dim=1)
        boxes, scores = boxes[valid], scores[valid]
        order = torch.sort(scores, descending=True, stable=True).indices[: cfg.pre_nms_top_n]
        boxes, scores = boxes[order], scores[order]
        keep = nms_indices(boxes.double().numpy(), scores.double().numpy(), np.zeros(len(boxes), np.int64), cfg.rpn_nms_threshold)
        keep = torch.as_tensor(keep[: cfg.post_nms_top_k], dtype=torch.long)
        out_boxes.append(boxes[keep].detach())
        out_scores.append(scores[keep].detach())
    return out_boxes, out_scores


def roi_forward(model: Detector, features: torch.Tensor, rois: list[torch.Tensor]):
    """RoI head on per-image box lists; returns (logits (R, K+1), deltas (R, K, 4))."""
    cfg = model.config
    idx = torch.cat([torch.full((len(r), 1), i, dtype=features.dtype) for i, r in enumerate(rois)])
    flat = torch.cat([r.to(features.dtype) for r in rois]) if rois else features.new_zeros((0, 4))
    crops = roi_align(
        features,
        torch.cat([idx, flat], dim=1),
        output_size=(cfg.roi_size, cfg.roi_size),
        spatial_scale=1.0 / cfg.stride,
        sampling_ratio=2,
        aligned=True,
    )
    return model.roi_head(crops)


def forward_backbone(model: Detector, image: ImageSample) -> FeatureMap:
    x = images_to_tensor([image], model.config, _dtype(model))
    with torch.no_grad():
        feats = model.features(x)
    return FeatureMap(feats[0], model.config.stride)


def propose_regions(model: Detector, fm: FeatureMap) -> list[Proposal]:
    with torch.no_grad():
        obj, deltas = model.rpn(fm.values[None])
        boxes, scores = select_proposals(model, obj, deltas)
    return [Proposal(Box(*map(float, b)), float(s)) for b, s in zip(boxes[0].tolist(), scores[0].tolist())]


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def detections_from_pass(model: Detector, fp: ForwardPass, score_threshold: float):
    """Per image ``(boxes (D,4), scores (D,), classes (D,))`` numpy arrays."""
    cfg = model.config
    logits, deltas = roi_forward(model, fp.features, fp.proposals)
    probs = torch.softmax(logits, dim=1)[:, : cfg.num_classes]
    out = []
    start = 0
    for props in fp.proposals:
        n = len(props)
        p = probs[start : start + n].double().numpy()
        boxes = clip_boxes(
            decode_boxes(props[:, None, :].to(deltas.dtype), deltas[start : start + n], ROI_BOX_WEIGHTS), cfg.image_size
        ).double().numpy()
        start += n
        ri, ci = np.nonzero(p > score_threshold)
        b = boxes[ri, ci]
        s = np.minimum(p[ri, ci], 1.0)
        ok = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        b, s, c = b[ok], s[ok], ci[ok].astype(np.int64)
        keep = nms_indices(b, s, c, cfg.det_nms_threshold)[: cfg.max_detections]
        out.append((b[keep], s[keep], c[keep]))
    return out


def to_detections(arrays) -> list[Detection]:
    boxes, scores, classes = arrays
    return [Detection(Box(*map(float, b)), int(c), float(s)) for b, s, c in zip(boxes.tolist(), scores, classes)]


@torch.no_grad()
def detect_batch(model: Detector, images: Sequence, score_threshold: float) -> list[list[Detection]]:
    x = images_to_tensor(images, model.config, _dtype(model))
    fp = run_model(model, x)
    return [to_detections(a) for a in detections_from_pass(model, fp, score_threshold)]


def detect(model: Detector, image, score_threshold: float) -> list[Detection]:
    """Final detections with score strictly above ``score_threshold`` after per-class NMS."""
    return detect_batch(model, [image], score_threshold)[0]


# ---------------------------------------------------------------------------
# losses


def softmax_focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-element focal loss; ``gamma = 0`` is plain cross-entropy."""
    logpt = F.log_softmax(logits, dim=1).gather(1, targets[:, None]).squeeze(1)
    return -((1.0 - logpt.exp()) ** gamma) * logpt


def binary_focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    pt = p * targets + (1.0 - p) * (1.0 - targets)
    return (1.0 - pt) ** gamma * ce


def _cls_loss(logits, targets, use_focal, gamma):
    if use_focal:
        return softmax_focal_loss(logits, targets, gamma).mean()
    return F.cross_entropy(logits, targets)


def _obj_loss(logits, targets, use_focal, gamma):
    if use_focal:
        return binary_focal_loss(logits, targets, gamma).mean()
    return F.binary_cross_entropy_with_logits(logits, targets)


@dataclass
class Targets:
    boxes: torch.Tensor  # (G, 4)
    labels: torch.Tensor  # (G,)


def targets_from_annotations(anns, dtype=torch.float32) -> Targets:
    boxes = torch.tensor([a.box.as_tuple() for a in anns], dtype=dtype).reshape(-1, 4)
    labels = torch.tensor([a.class_id for a in anns], dtype=torch.long)
    return Targets(boxes, labels)


def match_anchors(model: Detector, gt: torch.Tensor):
    """Anchor labels (1 fg, 0 bg, -1 ignore) and matched-GT indices."""
    cfg = model.config
    anchors = model.anchors.to(gt.dtype)
    labels = torch.zeros(len(anchors), dtype=torch.long)
    if len(gt) == 0:
        return labels, torch.zeros(len(anchors), dtype=torch.long)
    ious = box_iou(anchors, gt)
    best, idx = ious.max(dim=1)
    labels[best >= cfg.anchor_neg_iou] = -1
    labels[best >= cfg.anchor_pos_iou] = 1
    # every GT keeps its highest-IoU anchors as positives
    gt_best = ious.max(dim=0).values
    lowq = ((ious == gt_best[None]) & (gt_best[None] > 0)).any(dim=1)
    labels[lowq] = 1
    return labels, idx


def detection_losses(
    model: Detector,
    fp: ForwardPass,
    targets: list[Targets],
    with_regression: bool = True,
    use_focal: bool = False,
) -> LossBreakdown:
    """Mean over images of the four two-stage terms; regression terms only on foreground matches."""
    cfg = model.config
    gamma = cfg.focal_gamma
    dt = fp.features.dtype
    anchors = model.anchors.to(dt)
    zero = fp.objectness.new_zeros(())
    rois = [torch.cat([p.to(dt), t.boxes.to(dt)]) for p, t in zip(fp.proposals, targets)]
    logits, deltas = roi_forward(model, fp.features, rois)
    rpn_cls, rpn_reg, roi_cls, roi_reg = [], [], [], []
    start = 0
    for i, t in enumerate(targets):
        gt = t.boxes.to(dt)
        labels, idx = match_anchors(model, gt)
        keep = labels >= 0
        rpn_cls.append(_obj_loss(fp.objectness[i][keep], labels[keep].to(dt), use_focal, gamma))
        pos = labels == 1
        if with_regression and pos.any():
            tgt = encode_boxes(anchors[pos], gt[idx[pos]], RPN_BOX_WEIGHTS)
            rpn_reg.append(F.smooth_l1_loss(fp.rpn_deltas[i][pos], tgt, beta=1.0 / 9, reduction="sum") / pos.sum())
        else:
            rpn_reg.append(zero)

        r = rois[i]
        n = len(r)
        lg, dl = logits[start : start + n], deltas[start : start + n]
        start += n
        if n == 0:
            roi_cls.append(zero)
            roi_reg.append(zero)
            continue
        cls_t = torch.full((n,), model.background, dtype=torch.long)
        if len(gt):
            ious = box_iou(r, gt)
            best, gidx = ious.max(dim=1)
            fg = best >= cfg.roi_fg_iou
            cls_t[fg] = t.labels[gidx[fg]]
        else:
            fg = torch.zeros(n, dtype=torch.bool)
        roi_cls.append(_cls_loss(lg, cls_t, use_focal, gamma))
        if with_regression and fg.any():
            tgt = encode_boxes(r[fg], gt[gidx[fg]], ROI_BOX_WEIGHTS)
            pred = dl[fg, cls_t[fg]]
            roi_reg.append(F.smooth_l1_loss(pred, tgt, beta=1.0, reduction="sum") / fg.sum())
        else:
            roi_reg.append(zero)
    mean = lambda xs: torch.stack(xs).mean()  # noqa: E731
    return LossBreakdown(mean(rpn_cls), mean(rpn_reg), mean(roi_cls), mean(roi_reg))


def supervised_loss(
    model: Detector,
    batch: Sequence[LabelledSample],
    use_focal: bool = False,
    proposals: Optional[list[torch.Tensor]] = None,
) -> LossBreakdown:
    """Burn-in loss on a labelled batch.

    ``proposals`` fixes the RoI-head inputs; by default the model's own RPN
    selection is used. Fixing them makes the loss a smooth function of the
    parameters, which is what the finite-difference checks rely on.
    """
    if not batch:
        raise ValueError("empty batch")
    dt = _dtype(model)
    x = images_to_tensor([s.image for s in batch], model.config, dt)
    fp = run_model(model, x, proposals)
    targets = [targets_from_annotations(s.annotations, dt) for s in batch]
    return detection_losses(model, fp, targets, with_regression=True, use_focal=use_focal)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, models: dict[str, Detector], meta: Optional[dict] = None) -> None:
    """Store named models as ``<role>/<param>`` arrays plus schema version and metadata."""
    arrays = {"__schema_version__": np.asarray(CHECKPOINT_SCHEMA)}
    cfgs = {}
    for role, model in models.items():
        for name, t in model.state_dict().items():
            arrays[f"{role}/{name}"] = t.detach().cpu().numpy()
        cfgs[role] = asdict(model.config)
    arrays["__meta__"] = np.asarray(json.dumps({"configs": cfgs, **(meta or {})}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Detector], dict]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__schema_version__"])
        if version != CHECKPOINT_SCHEMA:
            raise ValueError(f"checkpoint schema {version} != supported {CHECKPOINT_SCHEMA}")
        meta = json.loads(str(data["__meta__"]))
        models = {}
        for role, cfg in meta.pop("configs").items():
            for k in ("aspect_ratios", "pixel_mean", "pixel_std"):
                cfg[k] = tuple(cfg[k])
            model = Detector(DetectorConfig(**cfg))
            prefix = f"{role}/"
            state = {k[len(prefix) :]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith(prefix)}
            dtype = next(iter(state.values())).dtype
            model = model.to(dtype)
            model.load_state_dict(state)
            models[role] = model
    return models, meta
