"""Teacher-student semi-supervised training.

A phase runs in two stages. Burn-in fits the detector on the labelled images
alone. Mutual learning then copies the result into a teacher (and, in the
first phase, a student); the teacher pseudo-labels weakly augmented
unlabelled images, the student takes one SGD step on the supervised loss plus
``unsup_weight`` times a classification-only loss against those pseudo-labels
on a strongly augmented view, and the teacher tracks the student by an
exponential moving average.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataset import ImageSample, LabelledSample, PhaseDataset
from .detector import (
    Detector,
    ForwardPass,
    LossBreakdown,
    Targets,
    clone_detector,
    detection_losses,
    detections_from_pass,
    images_to_tensor,
    run_model,
    targets_from_annotations,
    to_detections,
)
from .geometry import Annotation, Detection


@dataclass(frozen=True)
class SSLConfig:
    """Semi-supervised hyperparameters. Field defaults are the full-scale values."""

    confidence_threshold: float = 0.7
    ema_rate: float = 0.9996
    learning_rate: float = 0.01
    momentum: float = 0.9
    unsup_weight: float = 4.0
    labelled_batch_size: int = 16
    unlabelled_batch_size: int = 16
    burn_in_epochs: int = 1
    mutual_epochs: int = 1
    ema_interval: int = 1
    use_focal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError("ema_rate must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.unsup_weight < 0:
            raise ValueError("unsup_weight must be >= 0")
        if min(self.labelled_batch_size, self.unlabelled_batch_size, self.ema_interval) < 1:
            raise ValueError("batch sizes and ema_interval must be >= 1")
        if min(self.burn_in_epochs, self.mutual_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "SSLConfig":
        """Settings for 64px synthetic scenes on one CPU core.

        Runs are ~100x shorter than the full-scale schedule, so the EMA rate
        is lowered to let the teacher follow the student within a phase.
        """
        base = cls(
            ema_rate=0.995,
            learning_rate=0.02,
            labelled_batch_size=8,
            unlabelled_batch_size=8,
            burn_in_epochs=150,
            mutual_epochs=4,
        )
        return replace(base, **overrides)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, stage: str):
        super().__init__(f"non-finite loss or gradient at {stage} iteration {iteration}")
        self.iteration = iteration
        self.stage = stage


def make_optimizer(model: Detector, config: SSLConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)


@dataclass
class TeacherStudentPair:
    teacher: Detector
    student: Detector
    optimizer: torch.optim.Optimizer

    @classmethod
    def from_model(cls, model: Detector, config: SSLConfig) -> "TeacherStudentPair":
        student = clone_detector(model)
        return cls(clone_detector(model), student, make_optimizer(student, config))


# ---------------------------------------------------------------------------
# augmentation


def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def flip_annotations(anns: Sequence[Annotation], width: int) -> tuple[Annotation, ...]:
    return tuple(Annotation(a.box.hflip(width), a.class_id) for a in anns)


def _blur(px: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(px, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    h, w = px.shape[:2]
    rows = sum(k[i] * pad[i : i + h, :, :] for i in range(len(k)))
    return sum(k[i] * rows[:, i : i + w, :] for i in range(len(k)))


def strong_augment(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Colour jitter, grayscale, Gaussian blur and cutout; geometry is unchanged."""
    px = pixels.astype(np.float32, copy=True)
    if rng.random() < 0.8:
        b, c, s = rng.uniform(0.6, 1.4, size=3)
        px = px * b
        px = (px - px.mean()) * c + px.mean()
        gray = px.mean(axis=2, keepdims=True)
        px = (px - gray) * s + gray
    if rng.random() < 0.2:
        px = np.repeat(px.mean(axis=2, keepdims=True), 3, axis=2)
    if rng.random() < 0.5:
        px = _blur(px, rng.uniform(0.1, 1.5))
    h, w = px.shape[:2]
    for p, lo in ((0.7, 0.05), (0.5, 0.02), (0.3, 0.02)):
        if rng.random() < p:
            area = rng.uniform(lo, 0.2) * h * w
            aspect = math.exp(rng.uniform(math.log(0.3), math.log(3.3)))
            eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
            ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
            y0, x0 = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
            px[y0 : y0 + eh, x0 : x0 + ew] = rng.random((eh, ew, 3))
    return np.clip(px, 0.0, 1.0).astype(np.float32)


def weak_views(batch: Sequence[LabelledSample], rng: np.random.Generator) -> list[LabelledSample]:
    """Random horizontal flip per sample, boxes mirrored to match."""
    out = []
    for s in batch:
        if rng.random() < 0.5:
            w = s.image.width
            out.append(LabelledSample(ImageSample(s.image.id, hflip(s.image.pixels)), flip_annotations(s.annotations, w)))
        else:
            out.append(s)
    return out


def weak_images(images: Sequence[ImageSample], rng: np.random.Generator) -> list[np.ndarray]:
    return [hflip(im.pixels) if rng.random() < 0.5 else im.pixels for im in images]


# ---------------------------------------------------------------------------
# pseudo-labels and losses

PseudoArrays = tuple  # (boxes (D,4), scores (D,), classes (D,)) numpy arrays


@torch.no_grad()
def teacher_pseudo_arrays(teacher: Detector, x: torch.Tensor, threshold: float) -> list[PseudoArrays]:
    fp = run_model(teacher, x.to(next(teacher.parameters()).dtype))
    return detections_from_pass(teacher, fp, threshold)


def generate_pseudo_labels(teacher: Detector, image, threshold: float, flip: bool = False) -> list[Detection]:
    """Teacher detections above ``threshold`` on the (optionally flipped) view.

    Boxes are in the frame of the view the teacher saw.
    """
    px = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if flip:
        px = hflip(px)
    x = images_to_tensor([px], teacher.config)
    return to_detections(teacher_pseudo_arrays(teacher, x, threshold)[0])


def pseudo_targets(arrays: Sequence[PseudoArrays], dtype) -> list[Targets]:
    return [
        Targets(torch.as_tensor(b, dtype=dtype).reshape(-1, 4), torch.as_tensor(c, dtype=torch.long).reshape(-1))
        for b, _, c in arrays
    ]


def unsupervised_loss_from_pass(model: Detector, fp: ForwardPass, pseudo: Sequence[PseudoArrays], use_focal=False) -> LossBreakdown:
    return detection_losses(model, fp, pseudo_targets(pseudo, fp.features.dtype), with_regression=False, use_focal=use_focal)


def unsupervised_loss(
    student: Detector,
    images: Sequence,
    pseudo: Sequence[Sequence[Detection]],
    use_focal: bool = False,
    proposals: Optional[list[torch.Tensor]] = None,
) -> LossBreakdown:
    """Objectness and RoI classification against hard pseudo-labels; regression terms are zero."""
    dtype = next(student.parameters()).dtype
    x = images_to_tensor(images, student.config, dtype)
    fp = run_model(student, x, proposals)
    arrays = [
        (
            np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4),
            np.array([d.score for d in dets]),
            np.array([d.class_id for d in dets], dtype=np.int64),
        )
        for dets in pseudo
    ]
    return unsupervised_loss_from_pass(student, fp, arrays, use_focal)


# ---------------------------------------------------------------------------
# forward accounting


class ForwardMeter:
    """Reads ``forward_count`` deltas of named models."""

    def __init__(self, models: dict[str, Detector]):
        self.models = models

    def snapshot(self) -> dict[str, int]:
        return {k: m.forward_count for k, m in self.models.items()}

    def since(self, snap: dict[str, int]) -> dict[str, int]:
        return {k: m.forward_count - snap[k] for k, m in self.models.items()}


def _add(a: dict, b: dict) -> dict:
    return {k: a.get(k, 0) + b.get(k, 0) for k in set(a) | set(b)}


@dataclass
class StepRecord:
    stage: str
    step: int
    phase: int
    losses: dict
    kd: dict = field(default_factory=dict)
    pseudo_labels: int = 0
    forwards: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "step": self.step,
            "phase": self.phase,
            "losses": self.losses,
            "kd": self.kd,
            "pseudo_labels": self.pseudo_labels,
            "forwards": self.forwards,
        }


# (model, forward pass on the batch it just saw, image tensor) -> weighted scalar
KDTerm = Callable[[Detector, ForwardPass, torch.Tensor], torch.Tensor]
# (pair, weak-view image tensor) -> per-image pseudo-label arrays
PseudoLabeler = Callable[["TeacherStudentPair", torch.Tensor], list]


def default_labeler(threshold: float) -> PseudoLabeler:
    def label(pair, x):
        return teacher_pseudo_arrays(pair.teacher, x, threshold)

    return label


def _check_finite(loss, params, step, stage):
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, stage)
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingDiverged(step, stage)


def burn_in(
    model: Detector,
    labelled: Sequence[LabelledSample],
    config: SSLConfig,
    rng: np.random.Generator,
    *,
    kd_term: Optional[KDTerm] = None,
    watch: Optional[dict[str, Detector]] = None,
    log: Optional[list] = None,
    phase: int = 0,
) -> Detector:
    """``burn_in_epochs`` passes of SGD on the supervised loss (plus ``kd_term``), in place."""
    if not labelled:
        raise ValueError("burn-in needs at least one labelled image")
    if config.burn_in_epochs == 0:
        return model
    opt = make_optimizer(model, config)
    params = list(model.parameters())
    meter = ForwardMeter({"model": model, **(watch or {})})
    bs = config.labelled_batch_size
    dtype = params[0].dtype
    step = 0
    for _epoch in range(config.burn_in_epochs):
        order = rng.permutation(len(labelled))
        for start in range(0, len(order), bs):
            snap = meter.snapshot()
            views = weak_views([labelled[i] for i in order[start : start + bs]], rng)
            x = images_to_tensor([v.image for v in views], model.config, dtype)
            fp = run_model(model, x)
            sup = detection_losses(model, fp, [targets_from_annotations(v.annotations, dtype) for v in views], True, config.use_focal)
            total = sup.total
            kd = {}
            if kd_term is not None:
                kd_val = kd_term(model, fp, x)
                total = total + kd_val
                kd["sup_kd"] = float(kd_val.detach())
            opt.zero_grad()
            total.backward()
            _check_finite(total, params, step, "burn_in")
            opt.step()
            if log is not None:
                log.append(StepRecord("burn_in", step, phase, sup.as_dict(), kd, 0, {"labelled": meter.since(snap)}))
            step += 1
    return model


def student_step(
    pair: TeacherStudentPair,
    labelled_batch: Sequence[LabelledSample],
    unlabelled_batch: Sequence[ImageSample],
    config: SSLConfig,
    rng: np.random.Generator,
    *,
    pseudo_labeler: Optional[PseudoLabeler] = None,
    sup_kd: Optional[KDTerm] = None,
    unsup_kd: Optional[KDTerm] = None,
    watch: Optional[dict[str, Detector]] = None,
    step: int = 0,
    phase: int = 0,
) -> StepRecord:
    """One SGD step of the student on ``L_sup + unsup_weight * L_unsup``; the teacher is read-only.

    The pair is updated in place and the step's record returned.
    """
    if not labelled_batch or not unlabelled_batch:
        raise ValueError("student_step needs non-empty labelled and unlabelled batches")
    student = pair.student
    labeler = pseudo_labeler or default_labeler(config.confidence_threshold)
    meter = ForwardMeter({"teacher": pair.teacher, "student": student, **(watch or {})})
    dtype = next(student.parameters()).dtype

    lab_views = weak_views(labelled_batch, rng)
    weak = weak_images(unlabelled_batch, rng)
    s0 = meter.snapshot()
    x_weak = images_to_tensor(weak, student.config)
    pseudo = labeler(pair, x_weak)
    unl_counts = meter.since(s0)
    strong = [strong_augment(px, rng) for px in weak]

    s1 = meter.snapshot()
    x_lab = images_to_tensor([v.image for v in lab_views], student.config, dtype)
    fp_lab = run_model(student, x_lab)
    sup = detection_losses(student, fp_lab, [targets_from_annotations(v.annotations, dtype) for v in lab_views], True, config.use_focal)
    total = sup.total
    kd = {}
    if sup_kd is not None:
        v = sup_kd(student, fp_lab, x_lab)
        total = total + v
        kd["sup_kd"] = float(v.detach())
    lab_counts = meter.since(s1)

    s2 = meter.snapshot()
    x_str = images_to_tensor(strong, student.config, dtype)
    fp_unl = run_model(student, x_str)
    unsup = unsupervised_loss_from_pass(student, fp_unl, pseudo, config.use_focal)
    unl_total = unsup.total
    if unsup_kd is not None:
        v = unsup_kd(student, fp_unl, x_str)
        unl_total = unl_total + v
        kd["unsup_kd"] = float(v.detach())
    total = total + config.unsup_weight * unl_total
    unl_counts = _add(unl_counts, meter.since(s2))

    params = list(student.parameters())
    pair.optimizer.zero_grad()
    total.backward()
    _check_finite(total, params, step, "mutual")
    pair.optimizer.step()
    losses = {"sup": sup.as_dict(), "unsup": unsup.as_dict(), "total": float(total.detach())}
    return StepRecord(
        "mutual", step, phase, losses, kd, int(sum(len(p[0]) for p in pseudo)),
        {"labelled": lab_counts, "unlabelled": unl_counts},
    )


@torch.no_grad()
def ema_update(pair: TeacherStudentPair, rate: float) -> TeacherStudentPair:
    """``teacher <- rate * teacher + (1 - rate) * student``, elementwise over parameters."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"EMA rate {rate} outside [0, 1]")
    for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
        t.mul_(rate).add_(s, alpha=1.0 - rate)
    return pair


def _labelled_stream(n: int, bs: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, bs):
            yield order[start : start + bs]


def iterations_per_epoch(n_unlabelled: int, config: SSLConfig) -> int:
    return math.ceil(n_unlabelled / config.unlabelled_batch_size)


def mutual_learning(
    pair: TeacherStudentPair,
    phase: PhaseDataset,
    config: SSLConfig,
    rng: np.random.Generator,
    *,
    pseudo_labeler: Optional[PseudoLabeler] = None,
    sup_kd: Optional[KDTerm] = None,
    unsup_kd: Optional[KDTerm] = None,
    watch: Optional[dict[str, Detector]] = None,
    log: Optional[list] = None,
) -> TeacherStudentPair:
    """``mutual_epochs`` passes over the unlabelled set; labelled batches cycle alongside."""
    lab, unl = phase.labelled, phase.unlabelled
    if not unl or config.mutual_epochs == 0:
        return pair
    stream = _labelled_stream(len(lab), config.labelled_batch_size, rng)
    bs = config.unlabelled_batch_size
    step = 0
    for _epoch in range(config.mutual_epochs):
        order = rng.permutation(len(unl))
        for start in range(0, len(order), bs):
            lab_batch = [lab[i] for i in next(stream)]
            unl_batch = [unl[i] for i in order[start : start + bs]]
            rec = student_step(
                pair, lab_batch, unl_batch, config, rng,
                pseudo_labeler=pseudo_labeler, sup_kd=sup_kd, unsup_kd=unsup_kd,
                watch=watch, step=step, phase=phase.phase_index,
            )
            step += 1
            if step % config.ema_interval == 0:
                ema_update(pair, config.ema_rate)
            if log is not None:
                log.append(rec)
    return pair


# ---------------------------------------------------------------------------
# one incremental phase


@dataclass
class IncrementalState:
    """Models carried across phases.

    ``model`` is the freshly initialised network used by the first burn-in;
    later phases resume burn-in from the previous phase's final teacher,
    which is also kept as ``old_teacher``.
    """

    model: Detector
    pair: Optional[TeacherStudentPair] = None
    old_teacher: Optional[Detector] = None
    phases_done: int = 0
    seen_classes: tuple[int, ...] = ()


def run_teacher_student_phase(
    state: IncrementalState,
    phase: PhaseDataset,
    config: SSLConfig,
    rng: np.random.Generator,
    *,
    pseudo_labeler: Optional[PseudoLabeler] = None,
    burn_in_kd: Optional[KDTerm] = None,
    sup_kd: Optional[KDTerm] = None,
    unsup_kd: Optional[KDTerm] = None,
    log: Optional[list] = None,
) -> IncrementalState:
    """Burn-in, teacher/student initialisation, mutual learning, then the old teacher takes the final teacher."""
    if not phase.labelled:
        raise ValueError(f"phase {phase.phase_index} has no labelled images")
    if state.old_teacher is not None:
        theta = clone_detector(state.old_teacher).requires_grad_(True)
    else:
        theta = state.model
    watch = {"old": state.old_teacher} if state.old_teacher is not None else {}
    burn_in(theta, phase.labelled, config, rng, kd_term=burn_in_kd, watch=watch, log=log, phase=phase.phase_index)
    if state.pair is None:
        state.pair = TeacherStudentPair.from_model(theta, config)
    else:
        state.pair.teacher = clone_detector(theta)
    state.pair.teacher.requires_grad_(False)
    mutual_learning(
        state.pair, phase, config, rng,
        pseudo_labeler=pseudo_labeler, sup_kd=sup_kd, unsup_kd=unsup_kd, watch=watch, log=log,
    )
    state.old_teacher = clone_detector(state.pair.teacher)
    state.old_teacher.requires_grad_(False)
    state.phases_done += 1
    state.seen_classes = tuple(state.seen_classes) + tuple(c for c in phase.classes if c not in state.seen_classes)
    return state
