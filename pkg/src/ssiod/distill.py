"""Knowledge distillation against a frozen copy of the previous model.

Two losses are provided. The ILOD form compares RoI-head outputs of the
current and old model on the current model's proposals. The Faster-ILOD form
adds an L1 term on backbone features and an L2 term on RPN outputs. Either
can be attached to burn-in (teacher placement), to the student's updates
(student placement) or to both.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .dataset import PhaseDataset
from .detector import Detector, ForwardPass, clone_detector, images_to_tensor, roi_forward, run_model
from .semisup import IncrementalState, KDTerm, SSLConfig, run_teacher_student_phase

METHODS = ("ilod", "faster_ilod")
PLACEMENTS = ("teacher_kd", "student_kd", "both_kd")
DISTANCES = ("l1", "l2")


@dataclass(frozen=True)
class DistillConfig:
    method: str = "faster_ilod"
    placement: str = "both_kd"
    sup_weight: float = 1.0
    unsup_weight: float = 1.0
    fea_weight: float = 1.0
    rpn_weight: float = 0.001
    roi_weight: float = 0.1
    fea_distance: str = "l1"
    rpn_distance: str = "l2"
    roi_distance: str = "l2"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown distillation method {self.method!r}; expected one of {METHODS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        for name in ("sup_weight", "unsup_weight", "fea_weight", "rpn_weight", "roi_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("fea_distance", "rpn_distance", "roi_distance"):
            if getattr(self, name) not in DISTANCES:
                raise ValueError(f"{name} must be one of {DISTANCES}")

    @property
    def on_burn_in(self) -> bool:
        return self.placement in ("teacher_kd", "both_kd")

    @property
    def on_student(self) -> bool:
        return self.placement in ("student_kd", "both_kd")


@dataclass(frozen=True)
class FrozenOldModel:
    """Previous-phase model and the classes it was trained on; never updated."""

    model: Detector
    classes: tuple[int, ...]

    @classmethod
    def freeze(cls, model: Detector, classes: Sequence[int]) -> "FrozenOldModel":
        m = clone_detector(model)
        m.requires_grad_(False)
        return cls(m, tuple(sorted(set(classes))))


def _distance(a: torch.Tensor, b: torch.Tensor, kind: str) -> torch.Tensor:
    if a.numel() == 0:
        return a.new_zeros(())
    d = a - b
    return d.abs().mean() if kind == "l1" else (d * d).mean()


@dataclass
class _OldOutputs:
    features: torch.Tensor
    objectness: torch.Tensor
    rpn_deltas: torch.Tensor


@torch.no_grad()
def _old_outputs(old: FrozenOldModel, x: torch.Tensor) -> _OldOutputs:
    m = old.model
    feats = m.features(x.to(next(m.parameters()).dtype))
    obj, deltas = m.rpn(feats)
    return _OldOutputs(feats, obj, deltas)


def _roi_term(current: Detector, old: FrozenOldModel, fp: ForwardPass, oo: _OldOutputs, kind: str) -> torch.Tensor:
    if sum(len(p) for p in fp.proposals) == 0:
        return fp.features.new_zeros(())
    cols = list(old.classes) + [current.background]
    logits, deltas = roi_forward(current, fp.features, fp.proposals)
    with torch.no_grad():
        o_logits, o_deltas = roi_forward(old.model, oo.features, fp.proposals)
    cls_idx = torch.as_tensor(old.classes, dtype=torch.long)
    d_cls = _distance(logits[:, cols], o_logits[:, cols].to(logits.dtype), kind)
    d_reg = _distance(deltas[:, cls_idx], o_deltas[:, cls_idx].to(deltas.dtype), kind)
    return d_cls + d_reg


def ilod_from_pass(current: Detector, old: FrozenOldModel, fp: ForwardPass, x: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    return _roi_term(current, old, fp, _old_outputs(old, x), kind)


def faster_ilod_from_pass(
    current: Detector, old: FrozenOldModel, fp: ForwardPass, x: torch.Tensor, config: DistillConfig = DistillConfig()
) -> torch.Tensor:
    oo = _old_outputs(old, x)
    dt = fp.features.dtype
    fea = _distance(fp.features, oo.features.to(dt), config.fea_distance)
    rpn = _distance(fp.objectness, oo.objectness.to(dt), config.rpn_distance) + _distance(
        fp.rpn_deltas, oo.rpn_deltas.to(dt), config.rpn_distance
    )
    roi = _roi_term(current, old, fp, oo, config.roi_distance)
    return config.fea_weight * fea + config.rpn_weight * rpn + config.roi_weight * roi


def _pass(current: Detector, images, proposals):
    x = images_to_tensor(images, current.config, next(current.parameters()).dtype)
    return run_model(current, x, proposals), x


def kd_loss_ilod(current: Detector, old: FrozenOldModel, images, proposals: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
    """Mean squared difference of old-class-plus-background RoI logits and old-class box deltas.

    Both models are evaluated on the current model's proposals (or on
    ``proposals`` when given).
    """
    fp, x = _pass(current, images, proposals)
    return ilod_from_pass(current, old, fp, x)


def kd_loss_faster_ilod(
    current: Detector,
    old: FrozenOldModel,
    images,
    config: DistillConfig = DistillConfig(),
    proposals: Optional[list[torch.Tensor]] = None,
) -> torch.Tensor:
    """``fea_weight * L1(features) + rpn_weight * L2(RPN outputs) + roi_weight * ILOD term``."""
    fp, x = _pass(current, images, proposals)
    return faster_ilod_from_pass(current, old, fp, x, config)


def make_kd_term(old: FrozenOldModel, config: DistillConfig, weight: float) -> KDTerm:
    def term(model: Detector, fp: ForwardPass, x: torch.Tensor) -> torch.Tensor:
        if config.method == "ilod":
            v = ilod_from_pass(model, old, fp, x, config.roi_distance)
        else:
            v = faster_ilod_from_pass(model, old, fp, x, config)
        return weight * v

    return term


def kd_train_phase(
    state: IncrementalState,
    phase: PhaseDataset,
    ssl: SSLConfig,
    kd: DistillConfig,
    rng: np.random.Generator,
    log: Optional[list] = None,
) -> IncrementalState:
    """One teacher-student phase with distillation against the previous phase's teacher.

    The first phase has no old model and runs as plain semi-supervised training.
    """
    old = None
    if state.old_teacher is not None:
        old = FrozenOldModel(state.old_teacher, tuple(state.seen_classes))
    burn_kd = make_kd_term(old, kd, kd.sup_weight) if old is not None and kd.on_burn_in else None
    sup_kd = unsup_kd = None
    if old is not None and kd.on_student:
        sup_kd = make_kd_term(old, kd, kd.sup_weight)
        unsup_kd = make_kd_term(old, kd, kd.unsup_weight)
    return run_teacher_student_phase(
        state, phase, ssl, rng, burn_in_kd=burn_kd, sup_kd=sup_kd, unsup_kd=unsup_kd, log=log
    )
