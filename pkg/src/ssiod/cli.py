"""Command-line entry point: ``ssiod {generate-data,run,report,grid}``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .dataset import save_coco_annotations
from .harness import (
    ExperimentConfig,
    METHODS,
    PLACEMENTS,
    emit_report,
    even_phase_sizes,
    grid_search,
    load_data,
    load_record,
    run_experiment,
)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML experiment config")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--placement", choices=PLACEMENTS)
    p.add_argument("--replay", action="store_true", default=None, help="replay all labelled data of earlier phases")
    p.add_argument("--label-ratio", type=float)
    p.add_argument("--phases", type=int, help="split the classes evenly into this many phases")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    over = {}
    for flag, key in (("method", "method"), ("placement", "placement"), ("replay", "replay"),
                      ("label_ratio", "label_ratio"), ("seed", "seed"), ("out", "out")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "phases", None) is not None:
        n = base.num_classes if base.source == "synthetic" else sum(base.phase_sizes)
        over["phase_sizes"] = even_phase_sizes(n, args.phases)
    return replace(base, **over) if over else base


def cmd_generate_data(args) -> int:
    cfg = config_from_args(args)
    if cfg.source != "synthetic":
        raise SystemExit("generate-data only makes synthetic data")
    out = Path(args.out or "data")
    train, test, classes = load_data(cfg)
    cats = [{"id": c, "name": f"class_{c}"} for c in classes]
    save_coco_annotations(train, out / "train.json", out / "images", cats)
    save_coco_annotations(test, out / "test.json", out / "images", cats)
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")
    return 0


def _print_record(rec) -> None:
    for t, r in enumerate(rec.reports):
        vals = " ".join(f"{k}={'nan' if r[k] is None else format(100 * r[k], '.1f')}" for k in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"))
        print(f"{rec.label} phase {t + 1}: {vals}")
    print("first-phase classes AP by phase: " + ", ".join(f"{100 * v:.1f}" for v in rec.forgetting))


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    rec = run_experiment(cfg)
    _print_record(rec)
    return 0


def cmd_report(args) -> int:
    records = [load_record(p) for p in args.runs]
    files = emit_report(records, args.out or "report")
    print(Path(files["table_md"]).read_text(), end="")
    return 0


def cmd_grid(args) -> int:
    cfg = config_from_args(args)
    res = grid_search(cfg)
    for point, ap in res.trials:
        print(json.dumps(point), f"final AP {100 * ap:.2f}")
    best = {k: getattr(res.best, k) for k in sorted(res.trials[0][0])}
    print("best:", json.dumps(best))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssiod", description="Semi-supervised incremental object detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate-data", help="write a synthetic train/test split in COCO JSON + PNG")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_generate_data)
    p = sub.add_parser("run", help="train and evaluate one method over all phases")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("report", help="tables and plots from saved runs")
    p.add_argument("runs", nargs="+", help="run directories or record.json files")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("grid", help="grid search over distillation weights")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
