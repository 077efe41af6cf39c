#!/usr/bin/env python3
"""
Command-line entry point: gen-data, train, propose, eval, gradcheck.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from box_geometry import ProposalSet, as_box_array
from cascade_pipeline import ALIGNMENTS, METRIC_PLANS, predict
from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, ensure_parent_dir, load_config
from csv_processor import CSVProcessor
from errors import (
    ConfigError,
    EvaluationError,
    FormatError,
    GenerationError,
    NumericalError,
    ShapeError,
    StatisticsError,
)
from evaluation import DEFAULT_BUDGETS, default_size_cuts, evaluate
from gradcheck import run_gradcheck
from synth_data import Scene, generate, load, save, split
from trainer import train

logger = logging.getLogger(__name__)

INPUT_ERRORS = (ConfigError, FormatError, GenerationError, EvaluationError, StatisticsError, ShapeError, OSError)
SPLITS = ("all", "train", "val")


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--out-dir", type=Path, help="output directory (default: runs)")
    parser.add_argument("--seed", type=int, help="seed for data generation and weight init")
    parser.add_argument("--threads", type=int, help="worker threads (never changes results)")
    parser.add_argument("--stages", type=int, help="number of cascade stages")
    parser.add_argument("--no-align", action="store_true", help="sample every stage at the initial anchors")
    parser.add_argument("--align", choices=ALIGNMENTS, help="alignment variant (default: full)")
    parser.add_argument("--metric", choices=METRIC_PLANS, help="per-stage sample metric plan")
    parser.add_argument("--no-stats", action="store_true", help="skip regression target statistics")
    parser.add_argument("--no-iou-loss", action="store_true", help="smooth-L1 at every stage")
    parser.add_argument("--nms-thr", type=float, help="NMS IoU threshold")
    parser.add_argument("--max-proposals", type=int, help="proposals kept per image")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crpn", description="Multi-stage cascade region proposals on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic dataset")
    _add_run_flags(gen)
    gen.add_argument("--out", type=Path, help="dataset file (default: <out-dir>/data.crpnd)")

    tr = sub.add_parser("train", help="train and write checkpoint + metrics")
    _add_run_flags(tr)
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--resume", type=Path, help="continue from this checkpoint")

    prop = sub.add_parser("propose", help="write proposals as JSON lines")
    _add_run_flags(prop)
    prop.add_argument("--checkpoint", type=Path, required=True)
    prop.add_argument("--data", type=Path, required=True)
    prop.add_argument("--split", choices=SPLITS, default="all")
    prop.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("eval", help="average-recall report for a proposals file")
    _add_run_flags(ev)
    ev.add_argument("--proposals", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--split", choices=SPLITS, default="all")
    ev.add_argument("--out", type=Path, required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    _add_run_flags(gc)
    gc.add_argument("--instances", type=int, default=50)
    gc.add_argument("--out", type=Path, help="CSV report path")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    alignment = "none" if args.no_align else args.align
    overrides = {
        "dataset": {"seed": args.seed},
        "pipeline": {
            "seed": args.seed,
            "num_stages": args.stages,
            "alignment": alignment,
            "metric": args.metric,
            "use_stats": False if args.no_stats else None,
            "use_iou_loss": False if args.no_iou_loss else None,
            "nms_threshold": args.nms_thr,
            "max_proposals": args.max_proposals,
        },
        "train": {"threads": args.threads},
        "output": {"dir": str(args.out_dir) if args.out_dir else None},
    }
    return load_config(args.config, overrides)


def _select(scenes: List[Scene], cfg: RunConfig, which: str) -> List[Scene]:
    if which == "all":
        return scenes
    train_scenes, val_scenes = split(scenes, cfg.train.val_scenes)
    return train_scenes if which == "train" else val_scenes


def cmd_gen_data(cfg: RunConfig, out_path: Path = None) -> Path:
    out_path = ensure_parent_dir(out_path) if out_path else cfg.ensure_output_dir() / "data.crpnd"
    scenes = generate(cfg.dataset, cfg.train.threads)
    save(scenes, out_path)
    print(f"✅ Wrote {len(scenes)} scenes to {out_path}")
    return out_path


def cmd_train(cfg: RunConfig, data_path: Path, resume: Path = None):
    scenes = load(data_path)
    train_scenes, val_scenes = split(scenes, cfg.train.val_scenes)
    out_dir = cfg.ensure_output_dir()
    processor = CSVProcessor(cfg.pipeline.num_stages)

    state = {}
    previous = None
    if resume is not None:
        ckpt = load_checkpoint(resume, cfg.pipeline)
        state = {"model": ckpt.model, "buffers": ckpt.buffers, "start_epoch": ckpt.epoch}
        if cfg.metrics_path.exists():
            previous = processor.read_metrics(cfg.metrics_path)
        print(f"✅ Resuming from {resume} at epoch {ckpt.epoch}")

    print(f"🧪 Training on {len(train_scenes)} scenes, validating on {len(val_scenes)} ({out_dir})")
    result = train(train_scenes, val_scenes, cfg.pipeline, cfg.train.threads, **state)

    metrics = result.metrics if previous is None else processor.merge_metrics(previous, result.metrics)
    save_checkpoint(cfg.checkpoint_path, result.model, result.buffers, result.epoch)
    processor.write_metrics(metrics, cfg.metrics_path)
    print(f"✅ Checkpoint: {cfg.checkpoint_path}")
    print(f"✅ Metrics: {cfg.metrics_path}")
    return result


def write_proposals(proposals: Sequence[ProposalSet], path: Path) -> None:
    with open(path, "w") as f:
        for props in proposals:
            record = {
                "scene_id": int(props.scene_id),
                "boxes": [[float(v) for v in box] for box in props.boxes],
                "scores": [float(s) for s in props.scores],
            }
            f.write(json.dumps(record) + "\n")


def read_proposals(path: Path) -> Dict[int, ProposalSet]:
    proposals = {}
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                boxes = as_box_array(np.asarray(record["boxes"], dtype=np.float64))
                scores = np.asarray(record["scores"], dtype=np.float64)
                scene_id = int(record["scene_id"])
            except (ValueError, KeyError, TypeError) as e:
                raise ConfigError(f"line {line_number} of {path} is not a proposal record: {e}", "proposals")
            if len(boxes) != len(scores):
                raise ShapeError(f"line {line_number}: boxes and scores differ in length", len(boxes), len(scores))
            proposals[scene_id] = ProposalSet(boxes, scores, scene_id)
    return proposals


def cmd_propose(cfg: RunConfig, checkpoint_path: Path, data_path: Path, out_path: Path, which: str = "all"):
    model = load_checkpoint(checkpoint_path, cfg.pipeline).model
    scenes = _select(load(data_path), cfg, which)
    proposals = predict(scenes, model, cfg.pipeline, cfg.train.threads)
    write_proposals(proposals, ensure_parent_dir(out_path))
    print(f"✅ Wrote proposals for {len(proposals)} scenes to {out_path}")
    return proposals


def cmd_eval(cfg: RunConfig, proposals_path: Path, data_path: Path, out_path: Path, which: str = "all"):
    scenes = _select(load(data_path), cfg, which)
    by_scene = read_proposals(proposals_path)
    proposals = [by_scene.get(s.scene_id, ProposalSet.empty(s.scene_id)) for s in scenes]
    report = evaluate(proposals, [s.gts for s in scenes], DEFAULT_BUDGETS, default_size_cuts(cfg.dataset.max_size))
    CSVProcessor(cfg.pipeline.num_stages).write_recall_report(report, ensure_parent_dir(out_path))
    summary = ", ".join(f"AR_{k}={ar:.4f}" for k, ar in sorted(report.ar_at_k.items()))
    print(f"✅ {summary}")
    print(f"✅ Recall report: {out_path}")
    return report


def cmd_gradcheck(instances: int = 50, out_path: Path = None, perturb=None) -> bool:
    results = run_gradcheck(instances, perturb)
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"{mark} {r.op}: max relative error {r.max_rel_error:.3e} ({r.instances} instances)")
    if out_path is not None:
        CSVProcessor().write_gradcheck_report(results, ensure_parent_dir(out_path))
    return all(r.passed for r in results)


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.resume)
        elif args.command == "propose":
            cmd_propose(cfg, args.checkpoint, args.data, args.out, args.split)
        elif args.command == "eval":
            cmd_eval(cfg, args.proposals, args.data, args.out, args.split)
        elif args.command == "gradcheck":
            if not cmd_gradcheck(args.instances, args.out):
                print("❌ Gradient check failed")
                return 3
        return 0
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}")
        return 3
    except INPUT_ERRORS as e:
        print(f"❌ {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
