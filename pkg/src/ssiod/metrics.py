"""COCO-style average precision and forgetting curves.

Matching follows the COCO protocol: detections are visited in descending
score, each claims the unmatched ground truth with the highest IoU at or
above the threshold (ties go to the lower ground-truth index), and ground
truth outside the evaluated area range is matched only as a last resort,
in which case the detection is ignored rather than counted. AP is the
101-point interpolated area under the precision envelope.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._backend import kernels
from .geometry import Annotation, Detection, boxes_to_array, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, LARGE_AREA),
    "large": (LARGE_AREA, math.inf),
}
MAX_DETECTIONS = 100


def in_area_range(area: float, name: str) -> bool:
    if name == "all":
        return True
    if name == "small":
        return area < SMALL_AREA
    if name == "medium":
        return SMALL_AREA <= area <= LARGE_AREA
    if name == "large":
        return area > LARGE_AREA
    raise ValueError(f"unknown area range {name!r}")


@dataclass
class MatchResult:
    """Per-detection outcome, aligned with the input detection order."""

    tp: np.ndarray  # bool
    ignored: np.ndarray  # bool; neither TP nor FP
    matched_gt: np.ndarray  # int, -1 when unmatched
    n_unmatched_gt: int

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp & ~self.ignored


def _match_arrays(det_boxes, det_scores, gt_boxes, iou_thr, gt_ignore, det_area_ok, ious=None):
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes)
    ious = np.ascontiguousarray(ious[order])
    m_sorted = kernels.greedy_match(ious, np.ascontiguousarray(gt_ignore, dtype=np.uint8), float(iou_thr))
    matched = np.full(len(order), -1, dtype=np.intp)
    matched[order] = m_sorted
    hit = matched >= 0
    ign = np.zeros(len(order), dtype=bool)
    ign[hit] = gt_ignore[matched[hit]].astype(bool)
    ign[~hit] = ~det_area_ok[~hit]
    return matched, hit & ~ign, ign


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    iou_thr: float,
    area_range: str = "all",
) -> MatchResult:
    """Greedy matching for one image and one class (callers partition by class)."""
    db = boxes_to_array(d.box for d in dets)
    gb = boxes_to_array(g.box for g in gts)
    g_ign = np.array([not in_area_range(g.box.area, area_range) for g in gts], dtype=np.uint8)
    d_ok = np.array([in_area_range(d.box.area, area_range) for d in dets], dtype=bool)
    matched, tp, ign = _match_arrays(db, [d.score for d in dets], gb, iou_thr, g_ign, d_ok)
    used = set(matched[tp].tolist())
    n_unmatched = int(sum(1 for g in range(len(gts)) if not g_ign[g] and g not in used))
    return MatchResult(tp, ign, matched, n_unmatched)


def average_precision(scores, is_tp, n_gt: int) -> Optional[float]:
    """101-point interpolated AP over non-ignored detections pooled across images.

    Returns None when there is nothing to evaluate (no ground truth and no
    detections); no ground truth with detections scores 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt == 0:
        return None if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= i/100 compared in integers, so k/n_gt landing on a grid point always counts
    idx = np.searchsorted(100 * tp, np.arange(101) * n_gt, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.mean())


@dataclass
class APReport:
    """Headline values are ratios in [0, 1]; NaN where no class is evaluable."""

    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    classes: tuple[int, ...] = ()

    HEADLINE = ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")

    def headline(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.HEADLINE}

    def to_record(self) -> dict:
        """JSON-friendly record with values scaled x100."""
        pct = lambda v: None if v is None or math.isnan(v) else 100.0 * v  # noqa: E731
        return {
            "classes": list(self.classes),
            **{k: pct(v) for k, v in self.headline().items()},
            "per_class": {str(c): {k: pct(v) for k, v in row.items()} for c, row in self.per_class.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "APReport":
        frac = lambda v: math.nan if v is None else v / 100.0  # noqa: E731
        return cls(
            **{k: frac(rec[k]) for k in cls.HEADLINE},
            per_class={int(c): {k: frac(v) for k, v in row.items()} for c, row in rec["per_class"].items()},
            classes=tuple(rec["classes"]),
        )


def _nanmean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else math.nan


def coco_ap_suite(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[Annotation]],
    classes: Sequence[int],
) -> APReport:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different numbers of images")
    classes = tuple(sorted(set(classes)))
    # table[area][class] -> list over IoU thresholds of AP-or-None
    table = {a: {c: [None] * len(IOU_THRESHOLDS) for c in classes} for a in AREA_RANGES}
    for c in classes:
        per_img = []
        for dets, gts in zip(dets_per_image, gts_per_image):
            d = [x for x in dets if x.class_id == c]
            d = sorted(d, key=lambda x: -x.score)[:MAX_DETECTIONS]  # stable
            g = [x for x in gts if x.class_id == c]
            db = boxes_to_array(x.box for x in d)
            gb = boxes_to_array(x.box for x in g)
            per_img.append(
                (
                    db,
                    np.array([x.score for x in d], dtype=np.float64),
                    np.array([x.box.area for x in d], dtype=np.float64),
                    np.array([x.box.area for x in g], dtype=np.float64),
                    iou_matrix(db, gb),
                )
            )
        for area in AREA_RANGES:
            g_ign = [np.array([not in_area_range(a, area) for a in ga], dtype=np.uint8) for *_, ga, _ in per_img]
            d_ok = [np.array([in_area_range(a, area) for a in da], dtype=bool) for _, _, da, _, _ in per_img]
            n_gt = int(sum((gi == 0).sum() for gi in g_ign))
            for ti, thr in enumerate(IOU_THRESHOLDS):
                scores, flags = [], []
                for (db, ds, _, _, ious), gi, dk in zip(per_img, g_ign, d_ok):
                    if len(ds) == 0:
                        continue
                    _, tp, ign = _match_arrays(db, ds, None, thr, gi, dk, ious=ious)
                    keep = ~ign
                    scores.append(ds[keep])
                    flags.append(tp[keep])
                s = np.concatenate(scores) if scores else np.zeros(0)
                f = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
                table[area][c][ti] = average_precision(s, f, n_gt)

    def pooled(area, thr_idx):
        return _nanmean(table[area][c][t] for c in classes for t in thr_idx)

    all_t = range(len(IOU_THRESHOLDS))
    t50, t75 = IOU_THRESHOLDS.index(0.5), IOU_THRESHOLDS.index(0.75)
    per_class = {}
    for c in classes:
        row = table["all"][c]
        if all(v is None for v in row):
            continue
        per_class[c] = {"ap": _nanmean(row), "ap50": _nanmean([row[t50]]), "ap75": _nanmean([row[t75]])}
    return APReport(
        ap=pooled("all", all_t),
        ap50=pooled("all", [t50]),
        ap75=pooled("all", [t75]),
        ap_s=pooled("small", all_t),
        ap_m=pooled("medium", all_t),
        ap_l=pooled("large", all_t),
        per_class=per_class,
        classes=classes,
    )


def forgetting_curve(phase_reports: Sequence[APReport], initial_classes: Sequence[int]) -> list[float]:
    """Per phase, the mean AP over the classes learned first."""
    out = []
    for i, rep in enumerate(phase_reports):
        missing = [c for c in initial_classes if c not in rep.per_class]
        if missing:
            raise ValueError(f"report {i} has no per-class AP for classes {missing}")
        out.append(float(np.mean([rep.per_class[c]["ap"] for c in initial_classes])))
    return out
