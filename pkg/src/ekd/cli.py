"""Command-line entry point: ``ekd <verb> [options]``.

Exit status: 0 success, 1 run or verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional

from . import checkpoint
from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .data import DataError, build_datasets
from .nn import SpecError, Stream
from .tensor import NumericalError
from .trainer import evaluate, export_student, init_seeds, load_stream, save_stream, train

log = logging.getLogger("ekd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# (name, teacher_mode, guided_teacher, guided_student)
ABLATION_ROWS = (
    ("KD", "fixed", False, False),
    ("KD+ET", "evolutionary", False, False),
    ("KD+S_G", "fixed", False, True),
    ("KD+S_G+ET", "evolutionary", False, True),
    ("KD+T_G+S_G", "fixed", True, True),
    ("EKD", "evolutionary", True, True),
)
ABLATION_COLUMNS = ("row", "teacher_mode", "guided_teacher", "guided_student", "student_test_acc",
                    "teacher_test_acc", "status")
SWEEP_COLUMNS = ("guided_pairs", "student_test_acc", "teacher_test_acc", "status")


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.workers is not None:
        cfg.train.data_workers = args.workers
    if args.out_dir is not None:
        cfg.run_dir = args.out_dir
    if getattr(args, "epochs", None) is not None:
        cfg.train.total_epochs = args.epochs
    cfg.train.validate()
    return cfg


def build_stream(cfg: ExperimentConfig, role: str, seed: int, guided: bool) -> Stream:
    m = cfg.teacher if role == "teacher" else cfg.student
    return Stream(cfg.model_spec(role), seed, guided=guided, num_pairs=cfg.train.num_guided_pairs,
                  reduce_channels=m.reduce_channels)


def _drop_heads(stream: Stream) -> Stream:
    stream.guided = [None] * len(stream.guided)
    return stream


def load_fixed_teacher(cfg: ExperimentConfig) -> Stream:
    path = cfg.train.teacher_checkpoint
    if not path:
        raise UsageError("teacher_mode=fixed needs train.teacher_checkpoint (run 'ekd pretrain' first)")
    teacher = load_stream(path, role="teacher")
    if teacher.spec != cfg.model_spec("teacher"):
        raise checkpoint.CheckpointError(f"{path}: architecture differs from the [teacher] section")
    if not cfg.train.guided_teacher:
        return _drop_heads(teacher)
    if not teacher.has_guided:
        raise ConfigError(f"guided_teacher is on but {path} has no guided modules")
    return teacher


def make_streams(cfg: ExperimentConfig):
    ts, ss = init_seeds(cfg.train.seed)
    mode = cfg.train.teacher_mode
    if mode == "evolutionary":
        teacher = build_stream(cfg, "teacher", ts, cfg.train.guided_teacher)
    elif mode == "fixed":
        teacher = load_fixed_teacher(cfg)
    else:
        teacher = None
    student = build_stream(cfg, "student", ss, cfg.train.guided_student)
    return teacher, student


def _sidecar(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict()}


# -- verbs ------------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig, role: str = "teacher") -> Path:
    """Single stream, classification loss only; writes ``pretrained.ekd`` into the run directory."""
    cfg = copy.deepcopy(cfg)
    guided = cfg.train.guided_teacher if role == "teacher" else cfg.train.guided_student
    pre = copy.deepcopy(cfg.train)
    pre.teacher_mode = "none"
    pre.guided_student = guided
    pre.teacher_checkpoint = None
    pre.loss_weights = {**pre.loss_weights, "l_d": 0.0, "l_f": 0.0}
    run_dir = Path(cfg.run_dir)
    cfgmod.write_snapshot(cfg, run_dir)
    ts, ss = init_seeds(pre.seed)
    stream = build_stream(cfg, role, ts if role == "teacher" else ss, guided)
    train_d, test_d = build_datasets(cfg.data)
    train(None, stream, train_d, test_d, pre, run_dir, cfg.data.augmentation(), _sidecar(cfg))
    path = save_stream(run_dir / "pretrained.ekd", stream, {**_sidecar(cfg), "role": role})
    print(f"pretrained {role} test accuracy {evaluate(stream, test_d):.4f}; checkpoint {path}")
    return path


def run_train(cfg: ExperimentConfig, dump_embeddings: bool = False):
    teacher, student = make_streams(cfg)
    train_d, test_d = build_datasets(cfg.data)
    run_dir = Path(cfg.run_dir)
    cfgmod.write_snapshot(cfg, run_dir)
    result = train(teacher, student, train_d, test_d, cfg.train, run_dir, cfg.data.augmentation(),
                   _sidecar(cfg), dump_embeddings or cfg.dump_embeddings)
    f = result.final
    print(f"student test accuracy {f.student_test_acc:.4f}; teacher {f.teacher_test_acc:.4f}; "
          f"run directory {run_dir}")
    return result


def _fmt_acc(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def run_ablate(cfg: ExperimentConfig) -> list:
    """Six-row grid with shared seed and data; failures are recorded and the grid continues."""
    root = Path(cfg.run_dir)
    cfgmod.write_snapshot(cfg, root)
    if not cfg.train.teacher_checkpoint:
        pre = copy.deepcopy(cfg)
        pre.run_dir = str(root / "pretrain")
        if cfg.ablation.pretrain_epochs is not None:
            pre.train.total_epochs = cfg.ablation.pretrain_epochs
        pre.train.guided_teacher = True
        cfg = copy.deepcopy(cfg)
        cfg.train.teacher_checkpoint = str(run_pretrain(pre, "teacher"))

    rows = []
    for name, mode, g_t, g_s in ABLATION_ROWS:
        row_cfg = copy.deepcopy(cfg)
        row_cfg.train.teacher_mode, row_cfg.train.guided_teacher, row_cfg.train.guided_student = mode, g_t, g_s
        row_cfg.run_dir = str(root / "rows" / name.replace("+", "_"))
        rows.append(_ablation_row(name, row_cfg, {"teacher_mode": mode, "guided_teacher": g_t,
                                                  "guided_student": g_s}))
        _write_csv(root / "ablation.csv", ABLATION_COLUMNS, rows)

    if cfg.ablation.pair_sweep:
        sweep = []
        slots = cfg.model_spec("student").num_blocks - 1
        for n in range(slots + 1):
            row_cfg = copy.deepcopy(cfg)
            row_cfg.train.teacher_mode = "evolutionary"
            row_cfg.train.guided_teacher = row_cfg.train.guided_student = True
            row_cfg.train.num_guided_pairs = n
            row_cfg.run_dir = str(root / "pairs" / str(n))
            sweep.append(_ablation_row(n, row_cfg, {}, key="guided_pairs"))
            _write_csv(root / "pair_sweep.csv", SWEEP_COLUMNS, sweep)
    for r in rows:
        print(f"{r['row']:<12} student {r['student_test_acc']} teacher {r['teacher_test_acc']} {r['status']}")
    return rows


def _ablation_row(name, cfg: ExperimentConfig, fields: dict, key: str = "row") -> dict:
    row = {key: name, **fields}
    try:
        result = run_train(cfg)
        row.update(student_test_acc=_fmt_acc(result.final.student_test_acc),
                   teacher_test_acc=_fmt_acc(result.final.teacher_test_acc), status="ok")
    except Exception as e:  # one broken row must not stop the grid
        log.error("ablation row %s failed: %s", name, e)
        row.update(student_test_acc="nan", teacher_test_acc="nan", status=f"failed: {type(e).__name__}: {e}")
    return row


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_eval(cfg: ExperimentConfig, ckpt: str, role: Optional[str], split: str) -> float:
    stream = load_stream(ckpt, role)
    train_d, test_d = build_datasets(cfg.data)
    data = test_d if split == "test" else train_d
    if len(data) == 0:
        raise DataError(f"the {split} split is empty")
    spec = stream.spec
    if (spec.in_channels, spec.input_resolution) != (data.channels, data.resolution):
        raise checkpoint.CheckpointError(
            f"{ckpt} expects {spec.in_channels}x{spec.input_resolution}px inputs; "
            f"data is {data.channels}x{data.resolution}px")
    if spec.num_classes != cfg.data.num_classes:
        raise checkpoint.CheckpointError(f"{ckpt} has {spec.num_classes} classes; data has {cfg.data.num_classes}")
    acc = evaluate(stream, data)
    print(f"accuracy {acc:.4f} n={len(data)}")
    return acc


def run_export(ckpt: str, output: str, role: Optional[str]) -> Path:
    stream = load_stream(ckpt, role)
    meta = checkpoint.load_sidecar(ckpt)
    meta.pop("streams", None)
    meta.pop("stream", None)
    path = export_student(output, stream, meta)
    print(f"exported backbone ({stream.backbone.num_parameters()} parameters) to {path}")
    return path


def run_verify_cmd(cfg: ExperimentConfig, level: str) -> bool:
    from .verify import run_verify
    results = run_verify(level, cfg.verify)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verify {level}: {len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
    else:
        print(f"verify {level}: all {len(results)} checks passed")
    return not failed


# -- argument parsing -------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="experiment config (.toml or .json)")
    p.add_argument("--seed", type=int, default=d, help="override train.seed")
    p.add_argument("--out-dir", default=d, help="override run_dir")
    p.add_argument("--workers", type=int, default=d, help="override train.data_workers")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="ekd", description="Evolutionary knowledge distillation harness")
    _global_flags(parser, suppress=False)
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train a single stream with classification loss only")
    p.add_argument("--role", choices=("teacher", "student"), default="teacher")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", parents=[common], help="teacher/student training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--teacher-checkpoint", help="pretrained teacher for teacher_mode=fixed")
    p.add_argument("--dump-embeddings", action="store_true", help="write embeddings.bin of student features")

    p = sub.add_parser("ablate", parents=[common], help="run the six-row ablation grid")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pair-sweep", action="store_true", help="also sweep the number of guided pairs")

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--role", choices=("teacher", "student"))
    p.add_argument("--split", choices=("test", "train"), default="test")

    p = sub.add_parser("export", parents=[common], help="write a backbone-only checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("output")
    p.add_argument("--role", choices=("teacher", "student"))

    p = sub.add_parser("verify", parents=[common], help="gradient, oracle and determinism checks")
    p.add_argument("level", nargs="?", choices=("fast", "full"), default="fast")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args)
        if args.verb == "pretrain":
            run_pretrain(cfg, args.role)
        elif args.verb == "train":
            if args.teacher_checkpoint:
                cfg.train.teacher_checkpoint = args.teacher_checkpoint
            run_train(cfg, args.dump_embeddings)
        elif args.verb == "ablate":
            if args.pair_sweep:
                cfg.ablation.pair_sweep = True
            run_ablate(cfg)
        elif args.verb == "eval":
            run_eval(cfg, args.checkpoint, args.role, args.split)
        elif args.verb == "export":
            run_export(args.checkpoint, args.output, args.role)
        elif args.verb == "verify":
            return EXIT_OK if run_verify_cmd(cfg, args.level) else EXIT_FAIL
    except (UsageError, ConfigError, SpecError) as e:
        print(f"ekd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, DataError, NumericalError, OSError, ValueError) as e:
        print(f"ekd: {args.verb} failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
