"""Self-checks behind ``ekd verify``: gradients, loss oracles, determinism, smoke training.

Losses are always reached through the :mod:`ekd.losses` module attributes so a
patched or broken implementation is what gets checked.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from . import oracles
from . import tensor as T
from .data import DatasetSpec, LabeledBatch, build_datasets, synth_generate
from .gradcheck import grad_check
from .nn import BlockOutputs, Stream, preset
from .trainer import TrainConfig, init_seeds, stream_losses, train

KL_SPOT = 2 * math.tanh(1.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _run(name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as e:  # a crash is a failed check, reported by name
        ok, detail = False, f"{type(e).__name__}: {e}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# -- toy double-stream model ------------------------------------------------


def toy_streams(seed: int = 5, dtype=np.float64, guided: bool = True):
    """2-block teacher and student for 8x8 inputs and 3 classes."""
    ts, ss = init_seeds(seed)
    teacher = Stream(preset("tiny-teacher", 3, 3, 8), ts, guided=guided, dtype=dtype)
    student = Stream(preset("tiny", 3, 3, 8), ss, guided=guided, dtype=dtype)
    return teacher, student


def toy_batch(seed: int = 5, n: int = 4, dtype=np.float64) -> LabeledBatch:
    rng = np.random.default_rng(seed)
    images = T.Tensor(rng.standard_normal((n, 3, 8, 8)).astype(dtype))
    return LabeledBatch(images, rng.integers(0, 3, size=n), np.arange(n))


def student_total_fn(teacher: Stream, student: Stream, batch: LabeledBatch, config: TrainConfig):
    """Student total loss as a function of the student's parameters, plus a reference for differencing.

    Returns ``(f, reference)``.  ``f`` is the training objective.  The
    reference holds the detached quantities (teacher outputs and the
    student's own backbone targets for its heads) at their current values,
    which is what the gradient of ``f`` means.
    """
    with T.no_grad():
        targets = teacher.collect(batch.images, training=True, update_stats=False)
        own = student.collect(batch.images, training=True, update_stats=False)

    def f(_params):
        outs = student.collect(batch.images, training=True, update_stats=False)
        return stream_losses(outs, batch.labels, losses.STUDENT, config, targets).total

    def reference(_params):
        outs = student.collect(batch.images, training=True, update_stats=False)
        frozen = BlockOutputs(outs.block_features, own.backbone_feature, own.backbone_logits,
                              outs.guided_features, outs.guided_logits, outs.guided_blocks)
        within = losses.within_stream_loss(frozen, config.temperature, "simplified", config.kl_t2_scaling)
        cross = losses.cross_stream_loss(targets, outs, config.temperature, config.kl_t2_scaling)
        cls = losses.classification_loss(outs, batch.labels)
        return losses.total_stream_loss(within, cross, cls, losses.STUDENT, config.weights).total

    return f, reference


# -- gradient checks --------------------------------------------------------


def op_cases(rng) -> dict:
    """Name -> (function of inputs, inputs) for every differentiable tensor op."""

    def t(*shape, positive=False, away_from_zero=False):
        a = rng.standard_normal(shape)
        if positive:
            a = np.abs(a) + 0.5
        if away_from_zero:
            a = np.sign(a) * (np.abs(a) + 0.1)
        return T.Tensor(a, requires_grad=True)

    w_out = rng.standard_normal((3, 4))
    rm, rv = np.zeros(3), np.ones(3)

    def weighted(y):
        # contract with fixed random weights so every output component matters
        w = np.random.default_rng(0).standard_normal(y.shape)
        return T.tsum(T.mul(y, T.Tensor(w)))

    def pool_input():
        # distinct values so the pooled argmax is unambiguous
        a = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1
        return T.Tensor(a.astype(np.float64), requires_grad=True)

    return {
        "add": (lambda x: weighted(T.add(x[0], x[1])), [t(3, 4), t(4)]),
        "sub": (lambda x: weighted(T.sub(x[0], x[1])), [t(3, 4), t(3, 1)]),
        "mul": (lambda x: weighted(T.mul(x[0], x[1])), [t(3, 4), t(1, 4)]),
        "scalar_mul": (lambda x: weighted(T.scalar_mul(x[0], -1.7)), [t(3, 4)]),
        "relu": (lambda x: weighted(T.relu(x[0])), [t(3, 4, away_from_zero=True)]),
        "square": (lambda x: weighted(T.square(x[0])), [t(3, 4)]),
        "exp": (lambda x: weighted(T.exp(x[0])), [t(3, 4)]),
        "log": (lambda x: weighted(T.log(x[0])), [t(3, 4, positive=True)]),
        "reshape": (lambda x: weighted(T.reshape(x[0], (4, 3))), [t(3, 4)]),
        "flatten": (lambda x: weighted(T.flatten(x[0])), [t(2, 3, 2)]),
        "sum": (lambda x: weighted(T.tsum(x[0], axis=1, keepdims=True)), [t(3, 4)]),
        "mean": (lambda x: weighted(T.mean(x[0], axis=0)), [t(3, 4)]),
        "matmul": (lambda x: weighted(T.matmul(x[0], x[1])), [t(3, 5), t(5, 4)]),
        "conv2d": (lambda x: weighted(T.conv2d(x[0], x[1], stride=1, padding=1)), [t(2, 2, 5, 5), t(3, 2, 3, 3)]),
        "conv2d_stride2": (lambda x: weighted(T.conv2d(x[0], x[1], stride=2, padding=1)),
                           [t(2, 2, 6, 6), t(3, 2, 3, 3)]),
        "max_pool2d": (lambda x: weighted(T.max_pool2d(x[0], 2)), [pool_input()]),
        "global_avg_pool2d": (lambda x: weighted(T.global_avg_pool2d(x[0])), [t(2, 3, 4, 4)]),
        "log_softmax": (lambda x: weighted(T.log_softmax(x[0], axis=1)), [t(3, 4)]),
        "softmax": (lambda x: weighted(T.softmax(x[0], axis=1)), [t(3, 4)]),
        "batch_norm2d_train": (
            lambda x: weighted(T.batch_norm2d(x[0], x[1], x[2], rm.copy(), rv.copy(), training=True,
                                              update_stats=False)),
            [t(4, 3, 2, 2), t(3), t(3)]),
        "batch_norm2d_eval": (
            lambda x: weighted(T.batch_norm2d(x[0], x[1], x[2], rm + 0.2, rv + 0.5, training=False)),
            [t(4, 3, 2, 2), t(3), t(3)]),
        "linear_head": (lambda x: weighted(T.matmul(x[0], T.Tensor(w_out))), [t(2, 3)]),
    }


def check_op_gradients(seed: int = 0, tol: float = 1e-5) -> list:
    out = []
    for name, (fn, inputs) in op_cases(np.random.default_rng(seed)).items():
        def run(fn=fn, inputs=inputs):
            r = grad_check(fn, inputs, h=1e-4, tol=tol)
            return r.passed, str(r)
        out.append(_run(f"gradcheck:{name}", run))
    return out


def check_student_total_gradient(seed: int = 5, tol: float = 1e-5) -> CheckResult:
    def run():
        teacher, student = toy_streams(seed)
        config = TrainConfig(teacher_mode="evolutionary", data_workers=1)
        f, ref = student_total_fn(teacher, student, toy_batch(seed), config)
        params = [p for _, p in student.named_parameters()]
        r = grad_check(f, params, h=1e-4, tol=tol, reference=ref)
        return r.passed, str(r)
    return _run("gradcheck:student_total", run)


# -- loss oracles -----------------------------------------------------------


def random_outputs(rng, n: int, m: int, d: int, heads: int) -> BlockOutputs:
    def t(*shape):
        return T.Tensor(rng.standard_normal(shape) * rng.uniform(0.5, 3.0))
    return BlockOutputs([], t(n, d), t(n, m), [t(n, d) for _ in range(heads)],
                        [t(n, m) for _ in range(heads)], list(range(heads)))


def _instance(rng):
    n, m, d = int(rng.integers(1, 9)), int(rng.integers(2, 11)), int(rng.integers(1, 9))
    temp = float(rng.choice([1.0, 2.0, 4.0]))
    return n, m, d, temp


def check_loss_oracles(trials: int = 100, seed: int = 0, atol: float = 1e-6) -> list:
    """Each loss against its explicit-loop oracle on random instances with C=3 (2 heads)."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("kl_distill", "l2_feature", "L_D", "L_F", "L_G1", "L_G2", "L_L")}
    errors = {}

    def attempt(names, fn):
        if any(n in errors for n in names):
            return
        try:
            got, want = fn()
        except Exception as e:
            for n in names:
                errors[n] = f"{type(e).__name__}: {e}"
            return
        for n, g, w in zip(names, got, want):
            worst[n] = max(worst[n], abs(float(g) - float(w)))

    def data(xs):
        return [x.data for x in xs]

    for _ in range(trials):
        n, m, d, temp = _instance(rng)
        s = random_outputs(rng, n, m, d, 2)
        t = random_outputs(rng, n, m, d, 2)
        labels = rng.integers(0, m, size=n)
        attempt(["kl_distill"], lambda: (
            [losses.kl_distill(s.backbone_logits, t.backbone_logits, temp).data],
            [oracles.kl(s.backbone_logits.data, t.backbone_logits.data, temp)]))
        attempt(["l2_feature"], lambda: (
            [losses.l2_feature(s.backbone_feature, t.backbone_feature).data],
            [oracles.l2(s.backbone_feature.data, t.backbone_feature.data)]))
        attempt(["L_D", "L_F"], lambda: (
            [x.data for x in losses.within_stream_loss(s, temp)],
            oracles.within_stream(s.backbone_logits.data, s.backbone_feature.data, data(s.guided_logits),
                                  data(s.guided_features), temp)))
        attempt(["L_G1", "L_G2"], lambda: (
            [x.data for x in losses.cross_stream_loss(t, s, temp)[:2]],
            oracles.cross_stream(t.backbone_logits.data, data(t.guided_logits), data(t.guided_features),
                                 s.backbone_logits.data, data(s.guided_logits), data(s.guided_features),
                                 temp)))
        attempt(["L_L"], lambda: (
            [losses.classification_loss(s, labels).data],
            [oracles.classification(data(s.all_logits()), labels)]))

    spot = float(losses.kl_distill(T.Tensor(np.array([[0.0, 2.0]])), T.Tensor(np.array([[2.0, 0.0]])),
                                   1.0).data)
    out = []
    for name, err in worst.items():
        ok = err < atol and name not in errors
        detail = errors.get(name, f"max abs error {err:.2e} over {trials} instances")
        if name == "kl_distill":
            spot_ok = abs(spot - KL_SPOT) < 1e-6
            ok = ok and spot_ok
            detail += f"; spot value {spot:.7f} (want {KL_SPOT:.7f})"
        out.append(CheckResult(f"oracle:{name}", bool(ok and not math.isnan(err)), detail))
    return out


# -- determinism ------------------------------------------------------------


def _tiny_data(seed: int):
    train_d = synth_generate(3, 8, 8, seed, split=0)
    test_d = synth_generate(3, 4, 8, seed, split=1)
    train_d = train_d.with_stats()
    return train_d, test_d.with_stats(train_d.mean, train_d.std)


def check_determinism(seed: int = 5) -> CheckResult:
    def once(tmp: Path):
        teacher, student = toy_streams(seed, dtype=np.float32)
        config = TrainConfig(total_epochs=2, batch_size=8, seed=seed, data_workers=1, lr_decay_epochs=[1])
        train_d, test_d = _tiny_data(seed)
        train(teacher, student, train_d, test_d, config, run_dir=tmp)
        return (tmp / "metrics.csv").read_bytes(), (tmp / "checkpoint_last.ekd").read_bytes()

    def run():
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            first, second = once(Path(a)), once(Path(b))
        same = first == second
        return same, "two runs bitwise identical" if same else "runs differ"

    return _run("determinism", run)


# -- smoke training ---------------------------------------------------------


def check_smoke(epochs: int = 3, seed: int = 5, data: DatasetSpec | None = None) -> CheckResult:
    def run():
        spec = data or DatasetSpec(n_per_class=100, n_test_per_class=20)
        train_d, test_d = build_datasets(spec)
        ts, ss = init_seeds(seed)
        teacher = Stream(preset("small-teacher", spec.num_classes, spec.channels, spec.effective_resolution), ts)
        student = Stream(preset("small-student", spec.num_classes, spec.channels, spec.effective_resolution), ss)
        config = TrainConfig(total_epochs=epochs, seed=seed, data_workers=1, lr_decay_epochs=[])
        result = train(teacher, student, train_d, test_d, config, augmentation=spec.augmentation())
        acc = result.final.student_test_acc
        chance = 1.0 / spec.num_classes
        ok = acc > 2 * chance
        return ok, f"student test accuracy {acc:.4f} after {epochs} epochs (chance {chance:.2f})"

    return _run("smoke_training", run)


def run_verify(level: str = "fast", options=None, report: Callable[[str], None] = print) -> list:
    """Run the suite, reporting one line per check; returns the CheckResults."""
    if level not in ("fast", "full"):
        raise ValueError(f"verify level must be 'fast' or 'full', got {level!r}")
    opts = options
    results = []

    def add(items):
        for r in items if isinstance(items, list) else [items]:
            results.append(r)
            report(r.line())

    if opts is None or opts.gradcheck:
        add(check_op_gradients())
        add(check_student_total_gradient())
    if opts is None or opts.oracles:
        add(check_loss_oracles(opts.oracle_trials if opts else 100))
    if opts is None or opts.determinism:
        add(check_determinism())
    if level == "full" and (opts is None or opts.smoke):
        add(check_smoke(opts.smoke_epochs if opts else 3))
    return results
