import numpy as np
import pytest
import torch

from ssiod.detector import build_detector, clone_detector, images_to_tensor, run_model
from ssiod.distill import (
    DistillConfig,
    FrozenOldModel,
    kd_loss_faster_ilod,
    kd_loss_ilod,
    kd_train_phase,
)
from ssiod.semisup import IncrementalState, SSLConfig, run_teacher_student_phase

from gradcheck import check_gradients

TINY = SSLConfig(labelled_batch_size=4, unlabelled_batch_size=4, burn_in_epochs=1, mutual_epochs=1, ema_rate=0.9, learning_rate=0.02)


def params(m):
    return [p.detach().clone() for p in m.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


class TestConfig:
    def test_table_defaults(self):
        c = DistillConfig()
        assert (c.fea_weight, c.rpn_weight, c.roi_weight) == (1.0, 0.001, 0.1)
        assert (c.fea_distance, c.rpn_distance, c.roi_distance) == ("l1", "l2", "l2")

    @pytest.mark.parametrize(
        "kw", [dict(method="rilod"), dict(placement="everywhere"), dict(sup_weight=-1), dict(roi_distance="l3")]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DistillConfig(**kw)

    def test_placement_flags(self):
        assert DistillConfig(placement="teacher_kd").on_burn_in and not DistillConfig(placement="teacher_kd").on_student
        assert DistillConfig(placement="student_kd").on_student and not DistillConfig(placement="student_kd").on_burn_in
        both = DistillConfig(placement="both_kd")
        assert both.on_burn_in and both.on_student


class TestLosses:
    def test_identical_models_zero(self, scenes):
        m = build_detector(seed=0, dtype=torch.float64)
        old = FrozenOldModel.freeze(m, [0, 1, 2, 3])
        imgs = [s.image for s in scenes[:3]]
        assert kd_loss_ilod(m, old, imgs).item() == pytest.approx(0.0, abs=1e-9)
        assert kd_loss_faster_ilod(m, old, imgs).item() == pytest.approx(0.0, abs=1e-9)

    def test_positive_for_different_models(self, scenes):
        m = build_detector(seed=0)
        old = FrozenOldModel.freeze(build_detector(seed=1), [0, 1])
        imgs = [s.image for s in scenes[:3]]
        assert kd_loss_ilod(m, old, imgs).item() > 0
        assert kd_loss_faster_ilod(m, old, imgs).item() > 0

    def test_zero_weights_vanish(self, scenes):
        m = build_detector(seed=0)
        old = FrozenOldModel.freeze(build_detector(seed=1), [0, 1])
        cfg = DistillConfig(fea_weight=0, rpn_weight=0, roi_weight=0)
        assert kd_loss_faster_ilod(m, old, [s.image for s in scenes[:3]], cfg).item() == 0.0

    def test_ilod_ignores_new_class_outputs(self, scenes):
        m = build_detector(seed=0)
        old = FrozenOldModel.freeze(m, [0, 1])
        with torch.no_grad():
            m.roi_head.cls.weight[5] += 1.0  # a new-class logit
            m.roi_head.reg.weight[4 * 6 : 4 * 7] += 1.0  # a new-class regressor
        assert kd_loss_ilod(m, old, [s.image for s in scenes[:2]]).item() == pytest.approx(0.0, abs=1e-9)

    def test_frozen_copy_is_independent(self):
        m = build_detector(seed=0)
        old = FrozenOldModel.freeze(m, [0])
        with torch.no_grad():
            next(m.parameters()).add_(1.0)
        assert not torch.equal(next(m.parameters()), next(old.model.parameters()))
        assert not any(p.requires_grad for p in old.model.parameters())

    @pytest.mark.parametrize("which", ["ilod", "faster_ilod"])
    def test_gradients(self, scenes, model64, which):
        old = FrozenOldModel.freeze(build_detector(seed=5, dtype=torch.float64), [0, 1, 2, 3])
        imgs = [s.image for s in scenes[:2]]
        x = images_to_tensor(imgs, model64.config, torch.float64)
        props = run_model(model64, x).proposals
        if which == "ilod":
            fn = lambda: kd_loss_ilod(model64, old, imgs, proposals=props)  # noqa: E731
        else:
            fn = lambda: kd_loss_faster_ilod(model64, old, imgs, proposals=props)  # noqa: E731
        _, bad = check_gradients(model64, fn)
        assert not bad, bad


def _two_phase(tiny_phases, runner):
    state = IncrementalState(build_detector(seed=0))
    log0 = []
    state = run_teacher_student_phase(state, tiny_phases[0], TINY, np.random.default_rng(0), log=log0)
    log1 = []
    state = runner(state, tiny_phases[1], np.random.default_rng(1), log1)
    return state, log1


class TestTrainPhase:
    def test_zero_weights_reproduce_semisup(self, tiny_phases):
        kd = DistillConfig(method="faster_ilod", placement="both_kd", sup_weight=0.0, unsup_weight=0.0)
        a, _ = _two_phase(tiny_phases, lambda s, p, r, log: kd_train_phase(s, p, TINY, kd, r, log))
        b, _ = _two_phase(tiny_phases, lambda s, p, r, log: run_teacher_student_phase(s, p, TINY, r, log=log))
        for role in ("teacher", "student"):
            assert same(params(getattr(a.pair, role)), params(getattr(b.pair, role)))

    def test_teacher_placement_keeps_student_updates_plain(self, tiny_phases):
        kd = DistillConfig(placement="teacher_kd")
        _, log = _two_phase(tiny_phases, lambda s, p, r, log: kd_train_phase(s, p, TINY, kd, r, log))
        assert all("sup_kd" in r.kd for r in log if r.stage == "burn_in")
        assert all(r.kd == {} for r in log if r.stage == "mutual")

    def test_student_placement_keeps_burn_in_plain(self, tiny_phases):
        kd = DistillConfig(placement="student_kd")
        _, log = _two_phase(tiny_phases, lambda s, p, r, log: kd_train_phase(s, p, TINY, kd, r, log))
        assert all(r.kd == {} for r in log if r.stage == "burn_in")
        assert all(set(r.kd) == {"sup_kd", "unsup_kd"} for r in log if r.stage == "mutual")

    def test_both_placement_old_forwards(self, tiny_phases):
        kd = DistillConfig(placement="both_kd")
        _, log = _two_phase(tiny_phases, lambda s, p, r, log: kd_train_phase(s, p, TINY, kd, r, log))
        for r in log:
            if r.stage == "burn_in":
                assert r.forwards["labelled"]["old"] == 1
            else:
                assert r.forwards["labelled"]["old"] == 1 and r.forwards["unlabelled"]["old"] == 1

    def test_first_phase_without_old_model_is_plain(self, tiny_phases):
        kd = DistillConfig(placement="both_kd")
        s1 = kd_train_phase(IncrementalState(build_detector(seed=0)), tiny_phases[0], TINY, kd, np.random.default_rng(0))
        s2 = run_teacher_student_phase(IncrementalState(build_detector(seed=0)), tiny_phases[0], TINY, np.random.default_rng(0))
        assert same(params(s1.pair.teacher), params(s2.pair.teacher))

    def test_old_model_bit_identical(self, tiny_phases):
        state = IncrementalState(build_detector(seed=0))
        run_teacher_student_phase(state, tiny_phases[0], TINY, np.random.default_rng(0))
        old = state.old_teacher
        snap = params(old)
        kd_train_phase(state, tiny_phases[1], TINY, DistillConfig(), np.random.default_rng(1))
        assert same(params(old), snap)
