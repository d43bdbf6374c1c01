import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ekd import losses as L
from ekd import tensor as T
from ekd.data import Augmentation, Dataset, LabeledBatch, synth_generate
from ekd.nn import Stream, preset
from ekd.tensor import Tensor
from ekd.trainer import (
    METRIC_COLUMNS,
    ConfigError,
    EpochMetrics,
    SgdState,
    TrainConfig,
    evaluate,
    load_stream,
    lr_at,
    make_sgd,
    read_embeddings,
    read_metrics_csv,
    sgd_step,
    stream_losses,
    train,
    train_step,
)
from ekd.verify import toy_batch, toy_streams


def cfg(**kw):
    kw.setdefault("data_workers", 1)
    return TrainConfig(**kw)


def state_bytes(stream):
    return {k: v.tobytes() for k, v in stream.state().items()}


# -- schedule and optimizer -------------------------------------------------


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (74, 0.1), (75, 0.01), (130, 0.001), (180, 0.0001)])
def test_lr_schedule(epoch, lr):
    assert lr_at(epoch, cfg()) == lr


@given(st.integers(0, 400), st.integers(0, 400))
def test_lr_non_increasing(a, b):
    c = cfg()
    lo, hi = sorted((a, b))
    assert lr_at(hi, c) <= lr_at(lo, c)


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(lr_decay_epochs=[10, 10])
    with pytest.raises(ConfigError):
        cfg(batch_size=0)
    with pytest.raises(ConfigError):
        cfg(temperature=0)
    with pytest.raises(ConfigError):
        cfg(teacher_mode="frozen")
    with pytest.raises(ConfigError):
        cfg(loss_weights={"l_x": 1.0})


def param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_sgd_vanilla_step():
    p = param(0.0, 1.0)
    sgd_step([("p", p)], SgdState(momentum=0.0, weight_decay=0.0, lr=0.1))
    assert p.data[0] == pytest.approx(-0.1)
    assert p.grad is None


def test_sgd_momentum_two_steps():
    p = param(0.0, 1.0)
    state = SgdState(momentum=0.9, weight_decay=0.0, lr=0.1)
    sgd_step([("p", p)], state)
    p.grad = np.array([1.0])
    sgd_step([("p", p)], state)
    assert p.data[0] == pytest.approx(-0.29)
    assert state.velocity["p"].shape == p.shape


def test_sgd_zero_grad_fixed_point():
    p = param(0.7, 0.0)
    sgd_step([("p", p)], SgdState(momentum=0.9, weight_decay=0.0, lr=0.1))
    assert p.data[0] == 0.7


def test_sgd_missing_grad():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(L.LossContractError):
        sgd_step([("p", p)], SgdState(0.9, 0.0, 0.1))


def test_weight_decay_skips_batch_norm():
    stream = Stream(preset("tiny", 3, 3, 8), 0)
    state = make_sgd(stream, cfg(weight_decay=0.5, momentum=0.0))
    before = {n: p.data.copy() for n, p in stream.named_parameters()}
    for _, p in stream.named_parameters():
        p.grad = np.zeros_like(p.data)
    sgd_step(stream.named_parameters(), state)
    for n, p in stream.named_parameters():
        if n in state.decay_exempt:
            assert np.array_equal(p.data, before[n]), n
        elif np.any(before[n]):
            assert not np.array_equal(p.data, before[n]), n
    assert state.decay_exempt


# -- one iteration ----------------------------------------------------------


def step_setup(mode="evolutionary", guided=True, seed=5, **kw):
    teacher, student = toy_streams(seed, guided=guided)
    c = cfg(teacher_mode=mode, guided_teacher=guided, guided_student=guided, **kw)
    t_opt = make_sgd(teacher, c) if mode == "evolutionary" else None
    return teacher, student, c, t_opt, make_sgd(student, c)


def test_step_is_deterministic():
    reports = []
    for _ in range(2):
        teacher, student, c, t_opt, s_opt = step_setup()
        r = train_step(teacher, student, toy_batch(), c, 0, t_opt, s_opt)
        reports.append((r.teacher.values(), r.student.values(), state_bytes(student)))
    assert reports[0] == reports[1]


def test_no_teacher_no_heads_is_plain_cross_entropy():
    _, student, c, _, s_opt = step_setup(mode="none", guided=False)
    batch = toy_batch()
    with T.no_grad():
        ce = float(L.cross_entropy(copy.deepcopy(student).collect(batch.images, True).backbone_logits,
                                   batch.labels).data)
    r = train_step(None, student, batch, c, 0, None, s_opt)
    assert r.teacher is None
    assert r.student.values()["total"] == r.student.values()["l_l"] == ce


def test_fixed_teacher_is_constant():
    teacher, student, c, _, s_opt = step_setup(mode="fixed")
    before = state_bytes(teacher)
    for step in range(3):
        r = train_step(teacher, student, toy_batch(seed=step), c, step, None, s_opt)
        assert r.teacher is None
    assert state_bytes(teacher) == before


def test_evolutionary_teacher_changes():
    teacher, student, c, t_opt, s_opt = step_setup()
    before = state_bytes(teacher)
    train_step(teacher, student, toy_batch(), c, 0, t_opt, s_opt)
    assert state_bytes(teacher) != before


def test_teacher_report_has_no_cross_term_student_does():
    teacher, student, c, t_opt, s_opt = step_setup()
    r = train_step(teacher, student, toy_batch(), c, 0, t_opt, s_opt)
    assert r.teacher.values()["l_g"] == 0.0
    assert r.student.values()["l_g"] > 0.0


def test_no_student_gradient_reaches_teacher():
    teacher, student, c, _, s_opt = step_setup(mode="fixed")
    train_step(teacher, student, toy_batch(), c, 0, None, s_opt)
    assert all(p.grad is None for p in teacher.parameters())


def test_student_targets_come_from_updated_teacher():
    teacher, student, c, t_opt, s_opt = step_setup()
    batch = toy_batch()
    student_before = copy.deepcopy(student)
    teacher_before = copy.deepcopy(teacher)
    r = train_step(teacher, student, batch, c, 0, t_opt, s_opt)

    def l_g1(t_stream):
        with T.no_grad():
            targets = t_stream.collect(batch.images, training=True, update_stats=False)
            outs = copy.deepcopy(student_before).collect(batch.images, training=True)
            return stream_losses(outs, batch.labels, L.STUDENT, c, targets).values()["l_g1"]

    assert r.student.values()["l_g1"] == l_g1(teacher)
    assert r.student.values()["l_g1"] != l_g1(teacher_before)


def test_zero_distillation_weights_equal_independent_training():
    zero = {"l_d": 0.0, "l_f": 0.0, "l_g1": 0.0, "l_g2": 0.0}
    teacher, student, c, t_opt, s_opt = step_setup(loss_weights=zero)
    ref_t, ref_s = copy.deepcopy(teacher), copy.deepcopy(student)
    ref_opts = [make_sgd(ref_t, c), make_sgd(ref_s, c)]
    for step in range(5):
        batch = toy_batch(seed=step)
        train_step(teacher, student, batch, c, step, t_opt, s_opt)
        for stream, opt in zip((ref_t, ref_s), ref_opts):
            outs = stream.collect(batch.images, training=True)
            L.classification_loss(outs, batch.labels).backward()
            sgd_step(stream.named_parameters(), opt)
    for got, want in ((teacher, ref_t), (student, ref_s)):
        a, b = got.state(), want.state()
        assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_names_component():
    _, student, c, _, _ = step_setup(mode="none", guided=False)
    batch = toy_batch()
    outs = student.collect(batch.images, training=True)
    outs.backbone_logits = Tensor(np.full(outs.backbone_logits.shape, np.inf))
    with T.finite_checks(False):
        with pytest.raises(T.NumericalError, match="student loss component classification"):
            stream_losses(outs, batch.labels, L.STUDENT, c, None)


def test_mismatched_streams_rejected():
    teacher = Stream(preset("small-teacher", 10), 0)
    student = Stream(preset("small-student", 5), 0)
    data = synth_generate(10, 2, 32, seed=0)
    with pytest.raises(ConfigError):
        train(teacher, student, data, data, cfg(total_epochs=1))


# -- evaluation -------------------------------------------------------------


class FixedModel:
    """Backbone stand-in that returns preset logits."""

    dtype = np.float64

    def __init__(self, logits):
        self.logits = logits
        self.calls = 0

    def __call__(self, x, training=False):
        out = self.logits[self.calls:self.calls + x.shape[0]]
        self.calls += x.shape[0]
        return Tensor(out)


def dataset(labels, m):
    n = len(labels)
    return Dataset(np.zeros((n, 1, 1, 1), np.float32), np.asarray(labels), m).with_stats([0.0], [1.0])


def test_evaluate_all_correct():
    labels = np.array([0, 2, 1, 1])
    assert evaluate(FixedModel(np.eye(3)[labels]), dataset(labels, 3)) == 1.0


def test_evaluate_ties_go_to_lowest_class():
    assert evaluate(FixedModel(np.zeros((2, 3))), dataset([0, 1], 3)) == 0.5


def test_evaluate_constant_prediction_is_chance():
    m, n = 5, 20000
    labels = np.random.default_rng(0).integers(0, m, n)
    acc = evaluate(FixedModel(np.tile(np.eye(m)[0], (n, 1))), dataset(labels, m))
    p = 1 / m
    assert abs(acc - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(FixedModel(np.zeros((0, 2))), Dataset(np.zeros((0, 1, 1, 1), np.float32),
                                                        np.zeros(0, np.int64), 2))


# -- full runs --------------------------------------------------------------


def tiny_data():
    train_d = synth_generate(3, 8, 8, seed=1, split=0).with_stats()
    test_d = synth_generate(3, 4, 8, seed=1, split=1).with_stats(train_d.mean, train_d.std)
    return train_d, test_d


def tiny_run(tmp_path, mode="evolutionary", epochs=3, **kw):
    teacher, student = toy_streams(5, dtype=np.float32)
    c = cfg(total_epochs=epochs, batch_size=8, lr_decay_epochs=[2], teacher_mode=mode, **kw)
    train_d, test_d = tiny_data()
    return train(teacher if mode != "none" else None, student, train_d, test_d, c, tmp_path,
                 Augmentation(crop_padding=1), dump_embeddings=True)


def test_run_artifacts(tmp_path):
    result = tiny_run(tmp_path)
    for name in ("metrics.csv", "steps.jsonl", "checkpoint_last.ekd", "checkpoint_best.ekd",
                 "student_export.ekd", "timing.csv", "embeddings.bin"):
        assert (tmp_path / name).exists(), name
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(rows) == 3 and list(rows[0]) == list(METRIC_COLUMNS)
    assert len((tmp_path / "steps.jsonl").read_text().splitlines()) == 3 * 3
    assert read_embeddings(tmp_path / "embeddings.bin").shape == (12, 6)
    assert result.export_path == tmp_path / "student_export.ekd"


def test_capability_gap_is_exact_difference(tmp_path):
    tiny_run(tmp_path)
    for row in read_metrics_csv(tmp_path / "metrics.csv"):
        assert row["capability_gap"] == row["teacher_test_acc"] - row["student_test_acc"]
        assert 0 <= row["student_test_acc"] <= 1 and 0 <= row["teacher_test_acc"] <= 1


def test_runs_are_bitwise_reproducible(tmp_path):
    tiny_run(tmp_path / "a")
    tiny_run(tmp_path / "b")
    for name in ("metrics.csv", "checkpoint_last.ekd", "student_export.ekd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_teacher_columns_nan_without_teacher(tmp_path):
    tiny_run(tmp_path, mode="none", epochs=1, guided_student=False)
    row = read_metrics_csv(tmp_path / "metrics.csv")[0]
    assert math.isnan(row["teacher_test_acc"]) and math.isnan(row["capability_gap"])


def test_checkpoints_reload_into_same_model(tmp_path):
    result = tiny_run(tmp_path, epochs=1)
    student = load_stream(tmp_path / "checkpoint_last.ekd", "student")
    teacher = load_stream(tmp_path / "checkpoint_last.ekd", "teacher")
    assert state_bytes(student) == state_bytes(result.student)
    assert state_bytes(teacher) == state_bytes(result.teacher)
    exported = load_stream(tmp_path / "student_export.ekd")
    assert not exported.has_guided
    _, test_d = tiny_data()
    assert evaluate(exported, test_d) == evaluate(result.student, test_d)


def test_epoch_metrics_row_order():
    m = EpochMetrics(0, 0.1, 0.5, 0.4, 0.6, 0.3, 0.6 - 0.3, {}, {})
    assert list(m.row()) == list(METRIC_COLUMNS)
