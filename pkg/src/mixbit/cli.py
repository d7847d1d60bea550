"""Command-line front end tying the pipeline together.

Subcommands compose the two-stage workflow:

    gen-data       write a synthetic detection dataset
    train-teacher  train the full-precision detector
    analyze-bits   derive the per-layer bit plan from a teacher checkpoint
    train-student  quantization-aware training with gated self-distillation
    eval           mAP50 of a checkpoint on a dataset split
    report         combined teacher-vs-student cost/accuracy comparison

Exit codes: 0 success, 2 invalid config, 3 missing input file,
4 numeric divergence, 1 anything else. Every run logs its resolved config
(defaults applied) to stderr, and all file writes are atomic.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import (Checkpoint, CheckpointError, atomic_write_bytes,
                         load_checkpoint, save_checkpoint)
from .config import Config, ConfigError, load_config
from .costs import cost_report
from .data import gen_synthetic_dataset, load_dataset, save_dataset
from .report import emit_report
from .train import DivergenceError, evaluate_map, train_student_ghost, train_teacher

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_DIVERGED = 4


def _log(msg: str) -> None:
    print(f"[mixbit] {msg}", file=sys.stderr)


def _load_config_logged(path) -> Config:
    cfg = load_config(path)
    _log("resolved config: " + json.dumps(cfg.resolved(), sort_keys=True))
    return cfg


def _write_json(path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_history(path, rows: list[dict]) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    atomic_write_bytes(path, text.encode("utf-8"))


def _detector_from(ckpt: Checkpoint):
    from .model import Detector
    return Detector.from_arrays(ckpt.spec, ckpt.tensors, trainable=False)


def cmd_gen_data(args) -> int:
    cfg = _load_config_logged(args.config)
    dataset = gen_synthetic_dataset(cfg.n_scenes, cfg.classes, cfg.seed,
                                    image_size=cfg.image_size,
                                    max_objects=cfg.max_objects)
    save_dataset(args.out, dataset)
    _log(f"wrote {len(dataset.scenes)} scenes "
         f"({len(dataset.train)} train / {len(dataset.val)} val) to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load_config_logged(args.config)
    dataset = load_dataset(args.data)
    ckpt, history = train_teacher(cfg.train_config(), dataset)
    save_checkpoint(args.out, ckpt)
    if args.history:
        _write_history(args.history, history)
    final = history[-1]["val_mAP50"] if history else None
    _log(f"teacher saved to {args.out} (final val mAP50: {final})")
    return EXIT_OK


def cmd_analyze_bits(args) -> int:
    cfg = _load_config_logged(args.config)
    ckpt = load_checkpoint(args.teacher)
    from .bitsearch import build_bit_plan
    det = _detector_from(ckpt)
    plan = build_bit_plan(ckpt.spec, det.layer_weight_arrays(),
                          threshold=cfg.threshold, b_min=cfg.b_min,
                          restarts=cfg.restarts, seed=cfg.seed,
                          exempt_first_layer=cfg.exempt_first_layer)
    atomic_write_bytes(args.out, (plan.to_json() + "\n").encode("utf-8"))
    _log(f"bit plan written to {args.out}: "
         f"{[e.bits for e in plan.layers]} (avg quantized bits: "
         f"{plan.average_quantized_bits()})")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _load_config_logged(args.config)
    dataset = load_dataset(args.data)
    teacher = load_checkpoint(args.teacher)
    ckpt, plan, history = train_student_ghost(teacher, cfg.train_config(student=True),
                                              dataset)
    save_checkpoint(args.out, ckpt)
    if args.plan_out:
        atomic_write_bytes(args.plan_out, (plan.to_json() + "\n").encode("utf-8"))
    if args.history:
        _write_history(args.history, history)
    final = history[-1]["val_mAP50"] if history else None
    _log(f"student saved to {args.out} (final val mAP50: {final})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config_logged(args.config)
    dataset = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    scenes = dataset.val if args.split == "val" else dataset.train
    report = evaluate_map(_detector_from(ckpt), scenes, plan=ckpt.bitplan,
                          conf_threshold=cfg.conf_threshold, nms_iou=cfg.nms_iou,
                          iou_threshold=cfg.iou_threshold)
    doc = report.to_dict()
    doc["split"] = args.split
    doc["config"] = cfg.resolved()
    _write_json(args.out, doc)
    _log(f"eval ({args.split}) mAP50 = {report.map50:.4f} -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config_logged(args.config)
    dataset = load_dataset(args.data)
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.student)
    input_hw = (teacher.spec.image_size, teacher.spec.image_size)
    cost_teacher = cost_report(teacher.spec, teacher.bitplan, input_hw)
    cost_student = cost_report(student.spec, student.bitplan, input_hw)
    eval_kwargs = dict(conf_threshold=cfg.conf_threshold, nms_iou=cfg.nms_iou,
                       iou_threshold=cfg.iou_threshold)
    eval_teacher = evaluate_map(_detector_from(teacher), dataset.val,
                                plan=teacher.bitplan, **eval_kwargs)
    eval_student = evaluate_map(_detector_from(student), dataset.val,
                                plan=student.bitplan, **eval_kwargs)
    comparison = emit_report(cost_teacher, eval_teacher, cost_student,
                             eval_student, args.out)
    _log(f"report -> {args.out} (deltas: "
         + json.dumps(comparison["deltas"], sort_keys=True) + ")")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixbit",
                                     description="Mixed bit-width QAT pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the full-precision teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("analyze-bits", help="derive the bit plan from a teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_bits)

    p = sub.add_parser("train-student", help="quantization-aware student training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-out", default=None)
    p.add_argument("--history", default=None)
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="teacher-vs-student comparison report")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_BAD_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_BAD_CONFIG
    except FileNotFoundError as e:
        _log(f"missing input file: {e}")
        return EXIT_MISSING_INPUT
    except DivergenceError as e:
        _log(f"numeric divergence: {e}")
        return EXIT_DIVERGED
    except (CheckpointError, ValueError, OSError) as e:
        _log(f"error: {e}")
        return EXIT_ERROR


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
