"""Experiment configuration, method dispatch, run records and reports."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .dataset import (
    DEFAULT_CATALOG,
    LabelledSample,
    PhaseDataset,
    SceneConfig,
    TaskSpec,
    build_phase_dataset,
    generate_synthetic_dataset,
    load_coco_annotations,
    phase_pool,
    split_tasks,
)
from .detector import DetectorConfig, build_detector, save_checkpoint
from .distill import DistillConfig, kd_train_phase
from .dualteacher import DualTeacherState, evaluate, replay_phases, run_phase
from .metrics import APReport, forgetting_curve
from .semisup import IncrementalState, SSLConfig, run_teacher_student_phase

METHODS = ("sequential", "ilod", "faster-ilod", "dualteacher")
PLACEMENTS = ("teacher", "student", "both")
KD_METHODS = ("ilod", "faster-ilod")
_DESK = SSLConfig.desk()


@dataclass
class ExperimentConfig:
    """Flat experiment description. Every field is a key of the YAML config file."""

    # data
    source: str = "synthetic"
    num_classes: int = 8
    train_images: int = 1000
    test_images: int = 200
    image_size: int = 64
    data_seed: Optional[int] = None  # defaults to ``seed``
    coco_train: Optional[str] = None
    coco_test: Optional[str] = None
    coco_image_dir: Optional[str] = None
    # protocol
    phase_sizes: tuple[int, ...] = (4, 4)
    label_ratio: float = 0.05
    method: str = "dualteacher"
    placement: str = "both"
    replay: bool = False
    seed: int = 0
    out: Optional[str] = None
    checkpoints: bool = True
    # semi-supervised
    confidence_threshold: float = _DESK.confidence_threshold
    ema_rate: float = _DESK.ema_rate
    learning_rate: float = _DESK.learning_rate
    momentum: float = _DESK.momentum
    unsup_weight: float = _DESK.unsup_weight
    labelled_batch_size: int = _DESK.labelled_batch_size
    unlabelled_batch_size: int = _DESK.unlabelled_batch_size
    burn_in_epochs: int = _DESK.burn_in_epochs
    mutual_epochs: int = _DESK.mutual_epochs
    ema_interval: int = _DESK.ema_interval
    use_focal: bool = _DESK.use_focal
    # distillation (ilod / faster-ilod only)
    kd_sup_weight: float = 1.0
    kd_unsup_weight: float = 1.0
    kd_fea_weight: float = 1.0
    kd_rpn_weight: float = 0.001
    kd_roi_weight: float = 0.1
    # grid search only: {kd_* key: [values]}
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        self.phase_sizes = tuple(int(s) for s in self.phase_sizes)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.source not in ("synthetic", "coco"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "coco" and not (self.coco_train and self.coco_test):
            raise ValueError("coco source needs coco_train and coco_test")
        if len(self.phase_sizes) < 1:
            raise ValueError("need at least one phase")
        if self.source == "synthetic":
            if not 2 <= self.num_classes <= len(DEFAULT_CATALOG):
                raise ValueError(f"num_classes must be in [2, {len(DEFAULT_CATALOG)}] for synthetic data")
            if sum(self.phase_sizes) != self.num_classes:
                raise ValueError(f"phase sizes {self.phase_sizes} do not sum to num_classes={self.num_classes}")
        for k in self.grid:
            if not k.startswith("kd_") or k not in self.field_names():
                raise ValueError(f"grid key {k!r} is not a distillation weight")
        # validate the nested views eagerly
        self.ssl
        self.distill

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @property
    def ssl(self) -> SSLConfig:
        return SSLConfig(**{f.name: getattr(self, f.name) for f in fields(SSLConfig)})

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(
            method="ilod" if self.method == "ilod" else "faster_ilod",
            placement=f"{self.placement}_kd",
            sup_weight=self.kd_sup_weight,
            unsup_weight=self.kd_unsup_weight,
            fea_weight=self.kd_fea_weight,
            rpn_weight=self.kd_rpn_weight,
            roi_weight=self.kd_roi_weight,
        )

    @property
    def label(self) -> str:
        name = self.method
        if self.method in KD_METHODS:
            name += f"[{self.placement}]"
        return name + ("-R" if self.replay else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_sizes"] = list(self.phase_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = sorted(set(d) - set(cls.field_names()))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(d)


def even_phase_sizes(num_classes: int, phases: int) -> tuple[int, ...]:
    if not 1 <= phases <= num_classes:
        raise ValueError(f"cannot split {num_classes} classes into {phases} phases")
    base, extra = divmod(num_classes, phases)
    return tuple(base + (1 if i < extra else 0) for i in range(phases))


# ---------------------------------------------------------------------------
# data


def load_data(config: ExperimentConfig) -> tuple[list[LabelledSample], list[LabelledSample], list[int]]:
    """Training pool, held-out test set and the ordered class list."""
    if config.source == "coco":
        train = load_coco_annotations(config.coco_train, config.coco_image_dir)
        test = load_coco_annotations(config.coco_test, config.coco_image_dir)
        classes = sorted({a.class_id for s in train for a in s.annotations})
        if classes != list(range(len(classes))):
            raise ValueError(f"category ids must be contiguous from 0, got {classes}")
        if len(classes) != sum(config.phase_sizes):
            raise ValueError(f"phase sizes {config.phase_sizes} do not cover the {len(classes)} training classes")
        return train, test, classes
    seed = config.seed if config.data_seed is None else config.data_seed
    catalog = DEFAULT_CATALOG[: config.num_classes]
    scene = SceneConfig(classes=catalog, image_size=config.image_size, seed=1000 + seed)
    train = generate_synthetic_dataset(scene, config.train_images)
    test = generate_synthetic_dataset(replace(scene, seed=2000 + seed), config.test_images, id_offset=config.train_images)
    return train, test, list(range(config.num_classes))


def build_phases(config: ExperimentConfig, train, classes) -> tuple[TaskSpec, list[PhaseDataset]]:
    spec = split_tasks(classes, config.phase_sizes)
    phases = [
        build_phase_dataset(phase_pool(train, spec, t), spec, t, config.label_ratio, config.seed + 7919 * t)
        for t in range(spec.num_phases)
    ]
    return spec, phases


def testset_fingerprint(test: Sequence[LabelledSample]) -> str:
    h = hashlib.sha256()
    for s in test:
        h.update(str(s.image.id).encode())
        for a in s.annotations:
            h.update(repr((a.class_id, a.box.as_tuple())).encode())
        if s.image.pixels is not None:
            h.update(np.ascontiguousarray(s.image.pixels).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    config: dict
    seed: int
    label: str
    test_fingerprint: str
    phase_classes: list[list[int]]
    reports: list[dict] = field(default_factory=list)
    forgetting: list[float] = field(default_factory=list)
    forwards: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    status: str = "running"
    error: Optional[str] = None

    def ap_reports(self) -> list[APReport]:
        return [APReport.from_record(r) for r in self.reports]

    @property
    def final_ap(self) -> float:
        return self.ap_reports()[-1].ap

    def to_json(self, with_steps: bool = False) -> dict:
        d = asdict(self)
        if not with_steps:
            d.pop("steps")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})


def summarize_forwards(steps: Sequence[dict]) -> dict:
    """Total forwards per stage and role, plus step counts; zero entries are dropped."""
    out: dict[str, Any] = {"burn_in_steps": 0, "mutual_steps": 0}
    for s in steps:
        out[f"{s['stage']}_steps"] += 1
        for part, counts in s["forwards"].items():
            key = f"{s['stage']}/{part}"
            bucket = out.setdefault(key, {})
            for role, n in counts.items():
                if n:
                    bucket[role] = bucket.get(role, 0) + n
    return out


def _runner(config: ExperimentConfig):
    if config.method == "dualteacher":
        return lambda state, phase, ssl, rng, log: run_phase(state, phase, ssl, rng, log=log)
    if config.method == "sequential":
        return lambda state, phase, ssl, rng, log: run_teacher_student_phase(state, phase, ssl, rng, log=log)
    kd = config.distill
    return lambda state, phase, ssl, rng, log: kd_train_phase(state, phase, ssl, kd, rng, log=log)


def _first_phase_key(config: ExperimentConfig) -> str:
    # phase 0 has no old model, so method, placement, replay and KD weights cannot affect it
    d = config.to_dict()
    for k in ("method", "placement", "replay", "out", "checkpoints", "grid"):
        d.pop(k)
    for k in list(d):
        if k.startswith("kd_"):
            d.pop(k)
    return json.dumps(d, sort_keys=True)


class PhaseCache:
    """In-memory reuse of first-phase results across runs that differ only in method."""

    def __init__(self):
        self._store: dict[str, tuple] = {}

    def get(self, config: ExperimentConfig):
        hit = self._store.get(_first_phase_key(config))
        return copy.deepcopy(hit) if hit is not None else None

    def put(self, config: ExperimentConfig, value: tuple) -> None:
        self._store[_first_phase_key(config)] = copy.deepcopy(value)


def _write_record(record: RunRecord, out: Optional[Path]) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(json.dumps(record.to_json(), indent=1, allow_nan=False))
    with open(out / "steps.jsonl", "w") as fh:
        for s in record.steps:
            fh.write(json.dumps(s) + "\n")


def run_experiment(config: ExperimentConfig, cache: Optional[PhaseCache] = None) -> RunRecord:
    """Train all phases of ``config.method`` and evaluate the teacher on seen classes after each.

    The record (and per-phase checkpoints) go under ``config.out`` when set;
    on failure a partial record is written before the error propagates.
    """
    out = Path(config.out) if config.out else None
    train, test, classes = load_data(config)
    spec, phases = build_phases(config, train, classes)
    if config.replay:
        phases = replay_phases(phases)
    record = RunRecord(
        config.to_dict(), config.seed, config.label, testset_fingerprint(test), [list(c) for c in spec.phase_classes]
    )
    ssl = config.ssl
    runner = _runner(config)
    rng = np.random.default_rng(config.seed)
    state: IncrementalState = DualTeacherState(
        build_detector(DetectorConfig(num_classes=len(classes), image_size=config.image_size), seed=config.seed)
    )
    reports: list[APReport] = []
    try:
        for t, phase in enumerate(phases):
            hit = cache.get(config) if (cache is not None and t == 0) else None
            if hit is not None:
                state, rng, report, steps, wall = hit
            else:
                t0 = time.perf_counter()
                log: list = []
                try:
                    state = runner(state, phase, ssl, rng, log)
                except Exception as exc:
                    record.steps.extend(s.as_dict() for s in log)
                    raise RuntimeError(f"phase {t}: {exc}") from exc
                report = evaluate(state.pair.teacher, test, state.seen_classes)
                steps = [s.as_dict() for s in log]
                wall = time.perf_counter() - t0
                if cache is not None and t == 0:
                    cache.put(config, (state, rng, report, steps, wall))
            reports.append(report)
            record.reports.append(report.to_record())
            record.steps.extend(steps)
            record.forwards.append(summarize_forwards(steps))
            record.wall_clock.append(wall)
            if out is not None and config.checkpoints:
                save_checkpoint(
                    out / f"phase{t}.npz",
                    {"old": state.old_teacher, "teacher": state.pair.teacher, "student": state.pair.student},
                    {"phase": t, "seen_classes": list(state.seen_classes)},
                )
        record.forgetting = forgetting_curve(reports, spec.phase_classes[0])
        record.status = "complete"
    except Exception as exc:
        record.status = "failed"
        record.error = str(exc)
        _write_record(record, out)
        raise
    _write_record(record, out)
    return record


def load_record(path) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    return RunRecord.from_json(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# reports


def _row_labels(records: Sequence[RunRecord]) -> list[str]:
    seeds = {r.seed for r in records}
    return [r.label if len(seeds) == 1 else f"{r.label} (seed {r.seed})" for r in records]


def _pct(v):
    return None if v is None else 100.0 * v


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.2f}"


def emit_report(records: Sequence[RunRecord], out_dir) -> dict[str, Path]:
    """Final-phase AP table, forgetting curves and compute accounting, as data files and plots."""
    if not records:
        raise ValueError("no records to report")
    prints = {r.test_fingerprint for r in records}
    if len(prints) > 1:
        raise ValueError(f"records were evaluated on different test sets: {sorted(prints)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = _row_labels(records)
    cols = APReport.HEADLINE
    # headline values x100, as AP is conventionally presented
    table = [
        {"method": lab, **{k: _pct(r.reports[-1][k]) for k in cols}} for lab, r in zip(labels, records)
    ]
    files = {}

    files["table_json"] = out / "table.json"
    files["table_json"].write_text(json.dumps(table, indent=1))
    lines = ["| method | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    lines += ["| " + row["method"] + " | " + " | ".join(_fmt(row[k]) for k in cols) + " |" for row in table]
    files["table_md"] = out / "table.md"
    files["table_md"].write_text("\n".join(lines) + "\n")

    forgetting = [{"method": lab, "curve": [100.0 * v for v in r.forgetting]} for lab, r in zip(labels, records)]
    files["forgetting_json"] = out / "forgetting.json"
    files["forgetting_json"].write_text(json.dumps(forgetting, indent=1))

    accounting = [
        {"method": lab, "forwards": r.forwards, "wall_clock": r.wall_clock} for lab, r in zip(labels, records)
    ]
    files["accounting_json"] = out / "accounting.json"
    files["accounting_json"].write_text(json.dumps(accounting, indent=1))

    files["forgetting_png"] = out / "forgetting.png"
    files["accounting_png"] = out / "accounting.png"
    _plot_forgetting(forgetting, files["forgetting_png"])
    _plot_accounting(labels, records, files["accounting_png"])
    return files


def _unlabelled_forwards_per_step(rec: RunRecord) -> dict[str, float]:
    total: dict[str, float] = {}
    steps = 0
    for f in rec.forwards:
        steps += f.get("mutual_steps", 0)
        for role, n in f.get("mutual/unlabelled", {}).items():
            total[role] = total.get(role, 0) + n
    return {k: v / steps for k, v in total.items()} if steps else {}


def _plot_forgetting(series, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for s in series:
        ax.plot(range(1, len(s["curve"]) + 1), s["curve"], marker="o", label=s["method"])
    ax.set_xlabel("phase")
    ax.set_ylabel("AP of first-phase classes")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_accounting(labels, records, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    roles = ("teacher", "old", "student")
    per = [_unlabelled_forwards_per_step(r) for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(labels))
    bottom = np.zeros(len(labels))
    for role in roles:
        v = np.array([p.get(role, 0.0) for p in per])
        ax.bar(x, v, bottom=bottom, label=role)
        bottom += v
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("forwards per unlabelled batch")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# grid search

DEFAULT_GRID = {"kd_sup_weight": [0.1, 1.0], "kd_unsup_weight": [0.1, 1.0]}


@dataclass
class GridResult:
    best: ExperimentConfig
    trials: list[tuple[dict, float]]


def grid_search(base: ExperimentConfig, grid: Optional[dict] = None, cache: Optional[PhaseCache] = None) -> GridResult:
    """Try every combination of KD weights and keep the one with the best final AP on all seen classes."""
    if base.method not in KD_METHODS:
        raise ValueError(f"method {base.method!r} has no searchable hyperparameters")
    grid = dict(grid if grid is not None else (base.grid or DEFAULT_GRID))
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid is empty")
    keys = sorted(grid)
    for k in keys:
        if not k.startswith("kd_") or k not in ExperimentConfig.field_names():
            raise ValueError(f"grid key {k!r} is not a distillation weight")
    cache = cache or PhaseCache()
    trials = []
    best, best_ap = None, -math.inf
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        out = None if base.out is None else str(Path(base.out) / "_".join(f"{k}={v}" for k, v in point.items()))
        cfg = replace(base, out=out, grid={}, **point)
        ap = run_experiment(cfg, cache).final_ap
        trials.append((point, ap))
        if ap > best_ap:
            best, best_ap = cfg, ap
    return GridResult(best, trials)

