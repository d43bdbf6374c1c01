"""Synchronous teacher/student training.

Per batch the evolutionary teacher is updated first from its own objective; the
student is then trained against fresh, detached outputs of the updated teacher
on the same samples.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from . import losses as L
from . import tensor as T
from .data import Augmentation, BatchStream, Dataset, LabeledBatch
from .nn import Backbone, BackboneSpec, Stream, export_backbone

log = logging.getLogger(__name__)

TEACHER_MODES = ("evolutionary", "fixed", "none")
WITHIN_MODES = ("simplified", "full_pairwise")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    data_workers: int = 8
    lr_initial: float = 0.1
    lr_decay_epochs: list = field(default_factory=lambda: [75, 130, 180])
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 4.0
    seed: int = 5
    total_epochs: int = 200
    teacher_mode: str = "evolutionary"
    guided_teacher: bool = True
    guided_student: bool = True
    within_stream_mode: str = "simplified"
    loss_weights: dict = field(default_factory=lambda: dict(L.DEFAULT_WEIGHTS))
    desync: int = 1
    kl_t2_scaling: bool = True
    num_guided_pairs: Optional[int] = None
    teacher_checkpoint: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"teacher_mode must be one of {TEACHER_MODES}")
        if self.within_stream_mode not in WITHIN_MODES:
            raise ConfigError(f"within_stream_mode must be one of {WITHIN_MODES}")
        unknown = set(self.loss_weights) - set(L.DEFAULT_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown loss weights {sorted(unknown)}")
        if self.total_epochs < 0 or self.data_workers < 1:
            raise ConfigError("total_epochs must be >= 0 and data_workers >= 1")

    @property
    def weights(self) -> dict:
        return {**L.DEFAULT_WEIGHTS, **self.loss_weights}

    def to_dict(self) -> dict:
        return asdict(self)


def init_seeds(seed: int) -> tuple:
    """(teacher, student) initialization seeds derived from the run seed."""
    s = np.random.SeedSequence([seed, 10]).generate_state(2)
    return int(s[0]), int(s[1])


# -- optimizer --------------------------------------------------------------


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule; the product is formed in decimal so 0.1 * 0.1 is exactly 0.01."""
    n = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return float(Decimal(repr(config.lr_initial)) * Decimal(repr(config.lr_decay_factor)) ** n)


@dataclass
class SgdState:
    momentum: float
    weight_decay: float
    lr: float
    velocity: dict = field(default_factory=dict)
    decay_exempt: set = field(default_factory=set)


def make_sgd(stream: Stream, config: TrainConfig) -> SgdState:
    return SgdState(config.momentum, config.weight_decay, config.lr_initial,
                    decay_exempt=stream.decay_exempt())


def sgd_step(params, state: SgdState) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v; grads are cleared.

    ``params`` is a sequence of (name, Tensor) pairs.
    """
    params = list(params)
    missing = [n for n, p in params if p.grad is None]
    if missing:
        raise L.LossContractError(f"no gradient for {len(missing)} parameters, e.g. {missing[:3]}")
    for name, p in params:
        g = p.grad
        if state.weight_decay and name not in state.decay_exempt:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        v *= state.momentum
        v += g
        p.data -= state.lr * v
        p.grad = None


# -- one iteration ----------------------------------------------------------


def _named(role: str, component: str, fn):
    """Evaluate one loss component, naming it if it turns non-finite."""
    try:
        out = fn()
    except T.NumericalError as e:
        raise T.NumericalError(f"{role} loss component {component} is not finite ({e})") from None
    parts = (out.total,) if isinstance(out, L.LossReport) else out if isinstance(out, tuple) else (out,)
    if not all(np.isfinite(p.data).all() for p in parts):
        raise T.NumericalError(f"{role} loss component {component} is not finite")
    return out


def stream_losses(outs, labels, role, config: TrainConfig, teacher_outs=None) -> L.LossReport:
    within = None
    if outs.num_heads:
        within = _named(role, "within_stream", lambda: L.within_stream_loss(
            outs, config.temperature, config.within_stream_mode, config.kl_t2_scaling))
    cross = None
    if teacher_outs is not None:
        s = outs
        if teacher_outs.num_heads != outs.num_heads:
            teacher_outs, s = teacher_outs.backbone_only(), outs.backbone_only()
        cross = _named(role, "cross_stream", lambda: L.cross_stream_loss(
            teacher_outs, s, config.temperature, config.kl_t2_scaling))
    cls = _named(role, "classification", lambda: L.classification_loss(outs, labels))
    report = _named(role, "total", lambda: L.total_stream_loss(
        within, cross, cls, role, config.weights, cross_expected=teacher_outs is not None))
    return report


@dataclass
class StepResult:
    teacher: Optional[L.LossReport]
    student: L.LossReport
    teacher_correct: int = 0
    student_correct: int = 0


def _correct(logits: T.Tensor, labels) -> int:
    return int((logits.data.argmax(axis=1) == labels).sum())


def train_step(teacher: Optional[Stream], student: Stream, batch, config: TrainConfig, step: int,
               teacher_opt: Optional[SgdState], student_opt: SgdState) -> StepResult:
    """One iteration: teacher update, then student update against the updated teacher.

    ``batch`` is a LabeledBatch or a (teacher view, student view) pair holding
    the same samples under independently drawn augmentations.
    """
    if isinstance(batch, LabeledBatch):
        t_batch = s_batch = batch
    else:
        t_batch, s_batch = batch
    mode = config.teacher_mode
    if mode != "none" and teacher is None:
        raise ConfigError(f"teacher_mode={mode} needs a teacher stream")

    t_report, t_correct = None, 0
    if mode == "evolutionary":
        t_outs = teacher.collect(t_batch.images, training=True)
        t_report = stream_losses(t_outs, t_batch.labels, L.TEACHER, config)
        t_report.total.backward()
        sgd_step(teacher.named_parameters(), teacher_opt)
        t_correct = _correct(t_outs.backbone_logits, t_batch.labels)

    targets = None
    if mode != "none":
        # fresh pass through the just-updated teacher on the student's view, so
        # targets describe exactly what the student sees; batch statistics in
        # training mode but running buffers are left alone
        with T.no_grad():
            targets = teacher.collect(s_batch.images, training=(mode == "evolutionary"), update_stats=False)
        if mode == "fixed":
            t_correct = _correct(targets.backbone_logits, s_batch.labels)

    s_outs = student.collect(s_batch.images, training=True)
    s_report = stream_losses(s_outs, s_batch.labels, L.STUDENT, config, targets)
    s_report.total.backward()
    sgd_step(student.named_parameters(), student_opt)
    return StepResult(t_report, s_report, t_correct, _correct(s_outs.backbone_logits, s_batch.labels))


def check_pair(teacher: Optional[Stream], student: Stream) -> None:
    """Both streams must agree on classes, and on feature width when both carry heads."""
    if teacher is None:
        return
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ConfigError("teacher and student disagree on the number of classes")
    if teacher.has_guided and student.has_guided:
        tb = [b for b, g in enumerate(teacher.guided) if g is not None]
        sb = [b for b, g in enumerate(student.guided) if g is not None]
        if tb != sb:
            raise ConfigError(f"guided heads attach at {tb} in the teacher but {sb} in the student")
        if teacher.spec.final_feature_dim != student.spec.final_feature_dim:
            raise ConfigError(f"guided feature widths differ: teacher {teacher.spec.final_feature_dim}, "
                              f"student {student.spec.final_feature_dim}")


# -- evaluation -------------------------------------------------------------


def predict(model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    backbone = model.backbone if isinstance(model, Stream) else model
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            x = T.Tensor(images[i:i + batch_size].astype(backbone.dtype, copy=False))
            out.append(backbone(x, training=False).data)
    return np.concatenate(out)


def evaluate(model, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in evaluation mode; argmax ties go to the lowest class."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    from .data import normalize
    if dataset.mean is None:
        dataset = dataset.with_stats()
    images = normalize(dataset.images, dataset.mean, dataset.std)
    logits = predict(model, images, batch_size)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


# -- run loop ---------------------------------------------------------------

ROLES = (L.TEACHER, L.STUDENT)
METRIC_COLUMNS = (
    ["epoch", "lr", "teacher_train_acc", "student_train_acc", "teacher_test_acc", "student_test_acc",
     "capability_gap"]
    + [f"{role}_{k}" for role in ROLES for k in L.COMPONENTS]
)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    teacher_train_acc: float
    student_train_acc: float
    teacher_test_acc: float
    student_test_acc: float
    capability_gap: float
    teacher_losses: dict
    student_losses: dict
    seconds: float = 0.0

    def row(self) -> dict:
        r = {k: getattr(self, k) for k in METRIC_COLUMNS[:7]}
        for role, losses in ((L.TEACHER, self.teacher_losses), (L.STUDENT, self.student_losses)):
            for k in L.COMPONENTS:
                r[f"{role}_{k}"] = losses.get(k, math.nan)
        return r


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            r = m.row()
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def stream_description(stream: Stream) -> dict:
    return {
        "spec": stream.spec.to_dict(),
        "guided_blocks": [b for b, g in enumerate(stream.guided) if g is not None],
        "reduce_channels": {str(b): g.spec.reduce_channels for b, g in enumerate(stream.guided) if g is not None},
        "dtype": str(stream.backbone.dtype),
    }


def stream_from_description(desc: dict) -> Stream:
    spec = BackboneSpec.from_dict(desc["spec"])
    blocks = desc.get("guided_blocks", [])
    reduce = {int(k): v for k, v in desc.get("reduce_channels", {}).items()}
    return Stream(spec, 0, guided_blocks=blocks, reduce_channels=reduce or None,
                  dtype=np.dtype(desc.get("dtype", "float32")))


def save_stream(path, stream: Stream, sidecar: dict) -> Path:
    return checkpoint.save(path, stream.state(), {**sidecar, "stream": stream_description(stream)})


def load_stream(path, role: Optional[str] = None) -> Stream:
    """Rebuild a stream from a checkpoint; ``role`` picks one stream of a two-stream file."""
    meta = checkpoint.load_sidecar(path)
    tensors = checkpoint.load(path)
    if "streams" in meta:
        role = role or L.STUDENT
        if role not in meta["streams"]:
            raise checkpoint.CheckpointError(f"{path} has no {role} stream")
        desc, prefix = meta["streams"][role], role + "."
    elif "stream" in meta:
        desc, prefix = meta["stream"], ""
    else:
        raise checkpoint.CheckpointError(f"{path}: sidecar does not describe an architecture")
    stream = stream_from_description(desc)
    try:
        stream.load_state(tensors, prefix)
    except (KeyError, ValueError) as e:
        raise checkpoint.CheckpointError(f"{path}: architecture/checkpoint mismatch: {e}") from None
    return stream


def export_student(path, student: Stream, sidecar: dict) -> Path:
    exported = export_backbone(student.backbone)
    holder = Stream.__new__(Stream)
    holder.backbone, holder.guided = exported, [None] * (exported.num_blocks - 1)
    return save_stream(path, holder, {**sidecar, "exported": True})


@dataclass
class RunResult:
    metrics: list
    checkpoints: dict
    export_path: Optional[Path]
    teacher: Optional[Stream]
    student: Stream

    @property
    def final(self) -> EpochMetrics:
        return self.metrics[-1]


def _mean_losses(reports) -> dict:
    reports = [r for r in reports if r is not None]
    if not reports:
        return {k: math.nan for k in L.COMPONENTS}
    vals = [r.values() for r in reports]
    return {k: float(np.mean([v[k] for v in vals])) for k in L.COMPONENTS}


def write_embeddings(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *features.shape))
        fh.write(features.tobytes())


def read_embeddings(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, d = struct.unpack_from("<II", buf, 0)
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, d)


def train(teacher: Optional[Stream], student: Stream, train_data: Dataset, test_data: Dataset,
          config: TrainConfig, run_dir=None, augmentation: Optional[Augmentation] = None,
          sidecar: Optional[dict] = None, dump_embeddings: bool = False) -> RunResult:
    """Run ``config.total_epochs`` epochs; write artifacts into ``run_dir`` when given."""
    config.validate()
    if config.teacher_mode != "none" and teacher is None:
        raise ConfigError(f"teacher_mode={config.teacher_mode} needs a teacher stream")
    if config.teacher_mode == "none":
        teacher = None
    check_pair(teacher, student)
    augmentation = augmentation or Augmentation()
    if train_data.mean is None:
        train_data = train_data.with_stats()
    if test_data.mean is None:
        test_data = test_data.with_stats(train_data.mean, train_data.std)
    run_dir = Path(run_dir) if run_dir is not None else None
    sidecar = dict(sidecar or {})
    sidecar.setdefault("train_config", config.to_dict())

    t_opt = make_sgd(teacher, config) if config.teacher_mode == "evolutionary" else None
    s_opt = make_sgd(student, config)
    streams = [0] if (config.desync == 0 or teacher is None) else [config.desync, 0]

    steps_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        steps_fh = open(run_dir / "steps.jsonl", "w")
    metrics: list = []
    ckpts: dict = {}
    best = -1.0
    step = 0
    try:
        for epoch in range(config.total_epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, config)
            s_opt.lr = lr
            if t_opt is not None:
                t_opt.lr = lr
            reports_t, reports_s = [], []
            t_correct = s_correct = seen = 0
            for views in BatchStream(train_data, config.batch_size, epoch, config.seed, augmentation,
                                     streams, True, config.data_workers):
                batch = views[0] if len(views) == 1 else views
                try:
                    res = train_step(teacher, student, batch, config, step, t_opt, s_opt)
                except T.NumericalError as e:
                    raise T.NumericalError(f"epoch {epoch} step {step}: {e}") from None
                reports_t.append(res.teacher)
                reports_s.append(res.student)
                t_correct += res.teacher_correct
                s_correct += res.student_correct
                seen += len(views[-1])
                if steps_fh is not None:
                    steps_fh.write(json.dumps({
                        "step": step, "epoch": epoch,
                        "teacher": res.teacher.to_json() if res.teacher else None,
                        "student": res.student.to_json(),
                    }) + "\n")
                step += 1
            s_test = evaluate(student, test_data)
            if teacher is not None:
                t_test = evaluate(teacher, test_data)
                t_train = t_correct / seen
            else:
                t_test = t_train = math.nan
            m = EpochMetrics(epoch, lr, t_train, s_correct / seen, t_test, s_test, t_test - s_test,
                             _mean_losses(reports_t), _mean_losses(reports_s), time.perf_counter() - t0)
            metrics.append(m)
            log.info("epoch %d lr %.4g student %.4f teacher %.4f", epoch, lr, s_test, t_test)
            if run_dir is not None:
                write_metrics_csv(run_dir / "metrics.csv", metrics)
                ckpts["last"] = _save_run_checkpoint(run_dir / "checkpoint_last.ekd", teacher, student,
                                                     sidecar, epoch, m)
                if s_test > best:
                    best = s_test
                    ckpts["best"] = _save_run_checkpoint(run_dir / "checkpoint_best.ekd", teacher, student,
                                                         sidecar, epoch, m)
    finally:
        if steps_fh is not None:
            steps_fh.close()
        if run_dir is not None and metrics:
            write_metrics_csv(run_dir / "metrics.csv", metrics)
            with open(run_dir / "timing.csv", "w") as fh:
                fh.write("epoch,seconds\n")
                fh.writelines(f"{m.epoch},{m.seconds:.3f}\n" for m in metrics)

    export_path = None
    if run_dir is not None:
        export_path = export_student(run_dir / "student_export.ekd", student,
                                     {**sidecar, "epoch": config.total_epochs - 1})
        if dump_embeddings:
            write_embeddings(run_dir / "embeddings.bin", student_features(student, test_data))
    return RunResult(metrics, ckpts, export_path, teacher, student)


def student_features(stream: Stream, dataset: Dataset) -> np.ndarray:
    from .data import normalize
    images = normalize(dataset.images, dataset.mean, dataset.std)
    out = []
    with T.no_grad():
        for i in range(0, len(images), 500):
            x = T.Tensor(images[i:i + 500].astype(stream.backbone.dtype, copy=False))
            out.append(stream.backbone.forward_blocks(x, training=False)[1].data)
    return np.concatenate(out)


def _save_run_checkpoint(path, teacher, student, sidecar, epoch, m: EpochMetrics) -> Path:
    tensors = {}
    streams = {}
    for role, s in ((L.TEACHER, teacher), (L.STUDENT, student)):
        if s is None:
            continue
        tensors.update(s.state(role + "."))
        streams[role] = stream_description(s)
    meta = {**sidecar, "epoch": epoch, "student_test_acc": m.student_test_acc, "streams": streams}
    return checkpoint.save(path, tensors, meta)
