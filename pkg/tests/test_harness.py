import json
from dataclasses import replace

import numpy as np
import pytest

from ssiod.harness import (
    ExperimentConfig,
    PhaseCache,
    RunRecord,
    emit_report,
    even_phase_sizes,
    grid_search,
    load_record,
    run_experiment,
    summarize_forwards,
)

TINY = dict(
    num_classes=4, phase_sizes=(2, 2), train_images=48, test_images=12, label_ratio=0.25,
    labelled_batch_size=4, unlabelled_batch_size=4, burn_in_epochs=1, mutual_epochs=1,
)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def cache():
    return PhaseCache()


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig.from_dict({"lerning_rate": 0.1})

    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny(method="ilod", placement="student")
        p = tmp_path / "c.yaml"
        import yaml

        p.write_text(yaml.safe_dump(cfg.to_dict()))
        assert ExperimentConfig.from_yaml(p) == cfg

    @pytest.mark.parametrize("bad", [dict(method="mean-teacher"), dict(placement="old"), dict(phase_sizes=(2, 1)),
                                     dict(num_classes=1, phase_sizes=(1,)), dict(grid={"lr": [1]}),
                                     dict(confidence_threshold=1.5)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            tiny(**bad)

    def test_labels(self):
        assert tiny().label == "dualteacher"
        assert tiny(replay=True).label == "dualteacher-R"
        assert tiny(method="faster-ilod", placement="teacher").label == "faster-ilod[teacher]"

    def test_views(self):
        cfg = tiny(method="ilod", placement="both", kd_sup_weight=0.5)
        assert cfg.ssl.burn_in_epochs == 1
        assert cfg.distill.method == "ilod" and cfg.distill.placement == "both_kd"
        assert cfg.distill.sup_weight == 0.5

    def test_even_split(self):
        assert even_phase_sizes(8, 2) == (4, 4)
        assert even_phase_sizes(7, 3) == (3, 2, 2)
        with pytest.raises(ValueError):
            even_phase_sizes(3, 4)


class TestRun:
    def test_sequential_has_no_old_forwards(self, cache):
        rec = run_experiment(tiny(method="sequential"), cache)
        assert rec.status == "complete" and len(rec.reports) == 2
        for f in rec.forwards:
            for k, v in f.items():
                if isinstance(v, dict):
                    assert "old" not in v

    def test_dualteacher_accounting(self, cache):
        rec = run_experiment(tiny(), cache)
        f0, f1 = rec.forwards
        assert "old" not in f0["mutual/unlabelled"]
        n = f1["mutual_steps"]
        assert f1["mutual/unlabelled"] == {"teacher": n, "old": n, "student": n}

    def test_single_phase_dualteacher_matches_sequential(self):
        a = run_experiment(tiny(num_classes=2, phase_sizes=(2,), method="dualteacher"))
        b = run_experiment(tiny(num_classes=2, phase_sizes=(2,), method="sequential"))
        assert a.reports == b.reports and a.forwards == b.forwards

    def test_deterministic(self):
        a = run_experiment(tiny(method="faster-ilod"))
        b = run_experiment(tiny(method="faster-ilod"))
        assert a.reports == b.reports and a.steps == b.steps

    def test_cache_matches_fresh(self, cache):
        cached = run_experiment(tiny(method="ilod"), cache)
        fresh = run_experiment(tiny(method="ilod"))
        assert cached.reports == fresh.reports

    def test_records_and_checkpoints(self, tmp_path, cache):
        out = tmp_path / "run"
        rec = run_experiment(tiny(out=str(out)), cache)
        assert (out / "phase0.npz").exists() and (out / "phase1.npz").exists()
        back = load_record(out)
        assert back.reports == rec.reports and back.forgetting == rec.forgetting
        lines = (out / "steps.jsonl").read_text().splitlines()
        assert len(lines) == len(rec.steps)

    def test_failure_writes_partial_record(self, tmp_path):
        out = tmp_path / "boom"
        with pytest.raises(RuntimeError, match="phase 0"):
            run_experiment(tiny(learning_rate=1e12, out=str(out)))
        back = load_record(out)
        assert back.status == "failed" and back.error and back.reports == []

    def test_summarize_forwards(self):
        steps = [
            {"stage": "burn_in", "forwards": {"labelled": {"student": 1, "old": 0}}},
            {"stage": "mutual", "forwards": {"labelled": {"student": 1}, "unlabelled": {"teacher": 1, "student": 1}}},
        ]
        assert summarize_forwards(steps) == {
            "burn_in_steps": 1, "mutual_steps": 1, "burn_in/labelled": {"student": 1},
            "mutual/labelled": {"student": 1}, "mutual/unlabelled": {"teacher": 1, "student": 1},
        }


def _record(label="x", ap=0.25, fp="abc"):
    rep = {"ap": ap, "ap50": 0.5, "ap75": 0.125, "ap_s": None, "ap_m": 0.2, "ap_l": None}
    return RunRecord({}, 0, label, fp, [[0], [1]], reports=[rep, rep], forgetting=[0.5, 0.25],
                     forwards=[{"mutual_steps": 2, "mutual/unlabelled": {"teacher": 2, "student": 2}}] * 2,
                     wall_clock=[1.0, 2.0], status="complete")


class TestReport:
    def test_single_row_scaled(self, tmp_path):
        files = emit_report([_record()], tmp_path)
        table = json.loads(files["table_json"].read_text())
        assert len(table) == 1 and table[0]["ap"] == 25.0 and table[0]["ap_s"] is None
        md = files["table_md"].read_text()
        assert "| x | 25.00 | 50.00 | 12.50 | nan | 20.00 | nan |" in md
        assert json.loads(files["forgetting_json"].read_text())[0]["curve"] == [50.0, 25.0]

    def test_plots_byte_identical(self, tmp_path):
        a = emit_report([_record("a"), _record("b", 0.5)], tmp_path / "a")
        b = emit_report([_record("a"), _record("b", 0.5)], tmp_path / "b")
        for k in ("forgetting_png", "accounting_png"):
            assert a[k].read_bytes() == b[k].read_bytes()

    def test_mismatched_test_sets_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="different test sets"):
            emit_report([_record(fp="a"), _record(fp="b")], tmp_path)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)


class TestGrid:
    def test_non_kd_rejected(self):
        for m in ("dualteacher", "sequential"):
            with pytest.raises(ValueError, match="no searchable hyperparameters"):
                grid_search(tiny(method=m))

    def test_singleton_grid(self, cache):
        res = grid_search(tiny(method="ilod"), {"kd_sup_weight": [0.5]}, cache)
        assert len(res.trials) == 1 and res.best.kd_sup_weight == 0.5

    def test_argmax(self, cache):
        res = grid_search(tiny(method="faster-ilod"), {"kd_unsup_weight": [0.0, 1.0]}, cache)
        aps = [ap for _, ap in res.trials]
        assert [p["kd_unsup_weight"] for p, _ in res.trials] == [0.0, 1.0]
        assert res.best.kd_unsup_weight == res.trials[int(np.argmax(aps))][0]["kd_unsup_weight"]

    def test_bad_key(self):
        with pytest.raises(ValueError):
            grid_search(tiny(method="ilod"), {"learning_rate": [0.1]})
