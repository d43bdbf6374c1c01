"""Within-stream, cross-stream, and classification losses for two-stream distillation.

Every supervising operand is detached before it enters a loss, so gradients
only ever reach the learning side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BlockOutputs
from .tensor import Tensor

TEACHER = "teacher"
STUDENT = "student"
COMPONENTS = ("l_d", "l_f", "l_g1", "l_g2", "l_g", "l_l", "total")


class LossContractError(ValueError):
    """Loss inputs violate a structural precondition."""


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def kl_distill(student_logits: Tensor, teacher_logits: Tensor, temperature: float,
               t2_scaling: bool = True) -> Tensor:
    """T^2 * batch-mean KL(softmax(teacher/T) || softmax(student/T))."""
    _same_shape(student_logits, teacher_logits, "kl_distill")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    teacher = T.detach(teacher_logits)
    log_p = T.log_softmax(teacher / temperature, axis=1).data
    p = np.exp(log_p)
    log_q = T.log_softmax(student_logits / temperature, axis=1)
    kl = T.tsum(T.mul(Tensor(p), Tensor(log_p) - log_q)) / student_logits.shape[0]
    if t2_scaling:
        kl = kl * float(temperature * temperature)
    return kl


def l2_feature(a: Tensor, b: Tensor) -> Tensor:
    """Batch mean of squared Euclidean row distances; ``b`` supervises."""
    _same_shape(a, b, "l2_feature")
    d = a - T.detach(b)
    return T.tsum(T.square(d)) / a.shape[0]


def within_stream_loss(outs: BlockOutputs, temperature: float, mode: str = "simplified",
                       t2_scaling: bool = True):
    """(L_D, L_F): guided heads learn from the backbone of the same stream.

    ``mode="full_pairwise"`` adds every deeper guided head as a further teacher.
    """
    if outs.num_heads == 0:
        raise LossContractError("within-stream loss needs at least one guided head")
    if mode not in ("simplified", "full_pairwise"):
        raise ValueError(f"unknown within-stream mode {mode!r}")
    l_d = _zero(outs.backbone_logits)
    l_f = _zero(outs.backbone_logits)
    for i in range(outs.num_heads):
        logits, feat = outs.guided_logits[i], outs.guided_features[i]
        l_d = l_d + kl_distill(logits, outs.backbone_logits, temperature, t2_scaling)
        l_f = l_f + l2_feature(feat, outs.backbone_feature)
        if mode == "full_pairwise":
            for j in range(i + 1, outs.num_heads):
                l_d = l_d + kl_distill(logits, outs.guided_logits[j], temperature, t2_scaling)
                l_f = l_f + l2_feature(feat, outs.guided_features[j])
    return l_d, l_f


def cross_stream_loss(teacher_outs: BlockOutputs, student_outs: BlockOutputs, temperature: float,
                      t2_scaling: bool = True):
    """(L_G1, L_G2, L_G) between corresponding heads of the two streams."""
    if teacher_outs.num_heads != student_outs.num_heads:
        raise LossContractError(f"teacher has {teacher_outs.num_heads} guided heads, "
                                f"student has {student_outs.num_heads}")
    if teacher_outs.guided_blocks != student_outs.guided_blocks:
        raise LossContractError("guided heads attach to different blocks in the two streams")
    l_g1 = kl_distill(student_outs.backbone_logits, teacher_outs.backbone_logits, temperature, t2_scaling)
    l_g2 = _zero(student_outs.backbone_logits)
    for ts, ss in zip(teacher_outs.guided_logits, student_outs.guided_logits):
        l_g1 = l_g1 + kl_distill(ss, ts, temperature, t2_scaling)
    for tf, sf in zip(teacher_outs.guided_features, student_outs.guided_features):
        l_g2 = l_g2 + l2_feature(sf, tf)
    return l_g1, l_g2, l_g1 + l_g2


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    n, m = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m})")
    onehot = np.zeros((n, m), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return -T.tsum(T.mul(Tensor(onehot), T.log_softmax(logits, axis=1))) / n


def classification_loss(outs: BlockOutputs, labels) -> Tensor:
    """Sum over all classifiers (backbone plus guided heads) of batch-mean CE."""
    total = cross_entropy(outs.backbone_logits, labels)
    for logits in outs.guided_logits:
        total = total + cross_entropy(logits, labels)
    return total


@dataclass
class LossReport:
    l_d: Tensor
    l_f: Tensor
    l_g1: Tensor
    l_g2: Tensor
    l_g: Tensor
    l_l: Tensor
    total: Tensor
    stream_role: str

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in COMPONENTS}

    def to_json(self) -> dict:
        return {"role": self.stream_role, **self.values()}


def receives_cross_stream(role: str) -> bool:
    # the student is the only stream trained against the other stream
    return role == STUDENT


def _weighted(x: Tensor, w: float) -> Tensor:
    return x if w == 1.0 else x * float(w)


DEFAULT_WEIGHTS = {"l_d": 1.0, "l_f": 1.0, "l_g1": 1.0, "l_g2": 1.0, "l_l": 1.0}


def total_stream_loss(within: Optional[tuple], cross: Optional[tuple], classification: Tensor,
                      role: str, weights: Optional[dict] = None, cross_expected: Optional[bool] = None
                      ) -> LossReport:
    """Assemble the per-stream objective.

    ``within`` is (L_D, L_F) or None when the stream has no guided heads;
    ``cross`` is (L_G1, L_G2, L_G) and may only be supplied for the student.
    ``cross_expected=False`` lets a student run without a teacher.
    """
    if role not in (TEACHER, STUDENT):
        raise ValueError(f"unknown stream role {role!r}")
    if cross is not None and not receives_cross_stream(role):
        raise LossContractError(f"the {role} stream does not receive the cross-stream loss")
    if cross_expected is None:
        cross_expected = receives_cross_stream(role)
    if cross is None and cross_expected:
        raise LossContractError(f"the {role} stream requires a cross-stream loss")
    w = {**DEFAULT_WEIGHTS, **(weights or {})}
    zero = _zero(classification)
    l_d, l_f = within if within is not None else (zero, zero)
    l_g1, l_g2, l_g = cross if cross is not None else (zero, zero, zero)
    total = _weighted(l_d, w["l_d"]) + _weighted(l_f, w["l_f"]) + _weighted(classification, w["l_l"])
    if cross is not None:
        if w["l_g1"] == 1.0 and w["l_g2"] == 1.0:
            total = total + l_g
        else:
            total = total + (_weighted(l_g1, w["l_g1"]) + _weighted(l_g2, w["l_g2"]))
    return LossReport(l_d, l_f, l_g1, l_g2, l_g, classification, total, role)
