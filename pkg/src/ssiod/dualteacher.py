"""Dual-teacher pseudo-labelling for incremental semi-supervised detection.

From the second phase on, the teacher of the previous phase is kept frozen
next to the current teacher. Each labels the weak view of every unlabelled
image and the student is trained on the union of both label sets, so objects
of old classes keep receiving foreground targets while new classes are
learned. There are no tunables beyond the semi-supervised ones.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataset import ImageSample, LabelledSample, PhaseDataset
from .detector import Detector, detect_batch, images_to_tensor
from .geometry import Annotation, Detection, nms_indices
from .metrics import APReport, coco_ap_suite
from .semisup import (
    IncrementalState,
    PseudoLabeler,
    SSLConfig,
    StepRecord,
    TeacherStudentPair,
    ema_update,
    generate_pseudo_labels,
    run_teacher_student_phase,
    student_step,
    teacher_pseudo_arrays,
)

# Evaluation keeps low-score detections so the precision-recall curve is complete.
EVAL_SCORE_THRESHOLD = 0.05


@dataclass
class DualTeacherState(IncrementalState):
    """Incremental state; ``old_teacher`` is absent exactly during the first phase."""

    @property
    def phase_index(self) -> int:
        return self.phases_done


def _union(a, b, nms_threshold: Optional[float]):
    boxes = np.concatenate([a[0], b[0]]).reshape(-1, 4)
    scores = np.concatenate([a[1], b[1]])
    classes = np.concatenate([a[2], b[2]]).astype(np.int64)
    if nms_threshold is not None and len(boxes):
        keep = nms_indices(boxes, scores, classes, nms_threshold)
        keep = np.sort(keep)
        boxes, scores, classes = boxes[keep], scores[keep], classes[keep]
    return boxes, scores, classes


def dual_labeler(old: Optional[Detector], threshold: float, nms_threshold: Optional[float] = None) -> PseudoLabeler:
    """Pseudo-labeler returning old-teacher labels followed by current-teacher labels."""

    def label(pair: TeacherStudentPair, x: torch.Tensor):
        new = teacher_pseudo_arrays(pair.teacher, x, threshold)
        if old is None:
            return new
        prev = teacher_pseudo_arrays(old, x, threshold)
        return [_union(p, n, nms_threshold) for p, n in zip(prev, new)]

    return label


def concat_pseudo_labels(
    state: IncrementalState,
    image,
    threshold: float,
    flip: bool = False,
    nms_threshold: Optional[float] = None,
) -> list[Detection]:
    """Old-teacher pseudo-labels concatenated with the current teacher's.

    No suppression is applied across the two lists unless ``nms_threshold`` is
    given; with disjoint class sets the two cannot overlap in class.
    """
    if state.pair is None:
        raise ValueError("state has no teacher yet")
    new = generate_pseudo_labels(state.pair.teacher, image, threshold, flip)
    if state.old_teacher is None:
        return new
    old = generate_pseudo_labels(state.old_teacher, image, threshold, flip)
    dets = old + new
    if nms_threshold is not None and dets:
        keep = nms_indices(
            [d.box.as_tuple() for d in dets], [d.score for d in dets], [d.class_id for d in dets], nms_threshold
        )
        dets = [dets[i] for i in sorted(keep)]
    return dets


def dualteacher_student_step(
    state: IncrementalState,
    labelled_batch: Sequence[LabelledSample],
    unlabelled_batch: Sequence[ImageSample],
    ssl: SSLConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> StepRecord:
    """Student step on dual-teacher pseudo-labels followed by one EMA update of the current teacher."""
    if state.pair is None:
        raise ValueError("state has no teacher-student pair yet")
    watch = {"old": state.old_teacher} if state.old_teacher is not None else None
    rec = student_step(
        state.pair, labelled_batch, unlabelled_batch, ssl, rng,
        pseudo_labeler=dual_labeler(state.old_teacher, ssl.confidence_threshold),
        watch=watch, step=step, phase=state.phases_done,
    )
    if (step + 1) % ssl.ema_interval == 0:
        ema_update(state.pair, ssl.ema_rate)
    return rec


def run_phase(
    state: IncrementalState,
    phase: PhaseDataset,
    ssl: SSLConfig,
    rng: np.random.Generator,
    log: Optional[list] = None,
) -> IncrementalState:
    """Burn-in, teacher (and first-phase student) initialisation, dual-teacher mutual learning, old teacher update."""
    if phase.phase_index != state.phases_done:
        raise ValueError(f"expected phase {state.phases_done}, got {phase.phase_index}")
    labeler = dual_labeler(state.old_teacher, ssl.confidence_threshold)
    return run_teacher_student_phase(state, phase, ssl, rng, pseudo_labeler=labeler, log=log)


def replay_phases(phases: Sequence[PhaseDataset]) -> list[PhaseDataset]:
    """Phase t's labelled set becomes the union of labelled sets 1..t."""
    out, pool = [], []
    for p in phases:
        pool = pool + list(p.labelled)
        out.append(PhaseDataset(tuple(pool), p.unlabelled, p.phase_index, p.classes))
    return out


def evaluate(model: Detector, test: Sequence[LabelledSample], classes: Sequence[int], batch_size: int = 50) -> APReport:
    """AP on ``test`` over ``classes``; detections and ground truth of other classes are dropped."""
    keep = set(classes)
    dets, gts = [], []
    for start in range(0, len(test), batch_size):
        chunk = test[start : start + batch_size]
        for s, d in zip(chunk, detect_batch(model, [s.image for s in chunk], EVAL_SCORE_THRESHOLD)):
            dets.append([x for x in d if x.class_id in keep])
            gts.append([a for a in s.annotations if a.class_id in keep])
    return coco_ap_suite(dets, gts, sorted(keep))


@dataclass
class SequenceResult:
    state: IncrementalState
    reports: list[APReport]
    log: list = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)


PhaseRunner = Callable[[IncrementalState, PhaseDataset, SSLConfig, np.random.Generator, Optional[list]], IncrementalState]


def run_sequence(
    model: Detector,
    phases: Sequence[PhaseDataset],
    ssl: SSLConfig,
    test: Sequence[LabelledSample],
    rng: np.random.Generator,
    replay: bool = False,
    runner: PhaseRunner = run_phase,
    on_phase_end: Optional[Callable[[IncrementalState, int], None]] = None,
) -> SequenceResult:
    """All phases in order, evaluating the teacher on the seen classes after each."""
    if not phases:
        raise ValueError("no phases to run")
    if replay:
        phases = replay_phases(phases)
    state = DualTeacherState(model)
    result = SequenceResult(state, [])
    for p in phases:
        t0 = time.perf_counter()
        state = runner(state, p, ssl, rng, result.log)
        result.wall_clock.append(time.perf_counter() - t0)
        result.reports.append(evaluate(state.pair.teacher, test, state.seen_classes))
        if on_phase_end is not None:
            on_phase_end(state, p.phase_index)
    result.state = state
    return result
