"""Reference implementations of every loss, written as explicit Python loops.

They share no code with :mod:`ekd.losses` or :mod:`ekd.tensor` and work on
plain nested sequences, so they serve as independent checks.
"""

import math


def _rows(x):
    return [[float(v) for v in row] for row in x]


def softmax_row(row, temperature=1.0):
    z = [v / temperature for v in row]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kl(student, teacher, temperature, t2_scaling=True):
    student, teacher = _rows(student), _rows(teacher)
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        p = softmax_row(t_row, temperature)
        q = softmax_row(s_row, temperature)
        for pi, qi in zip(p, q):
            if pi > 0:
                total += pi * (math.log(pi) - math.log(qi))
    value = total / len(student)
    return value * temperature * temperature if t2_scaling else value


def l2(a, b):
    a, b = _rows(a), _rows(b)
    total = 0.0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            total += (x - y) ** 2
    return total / len(a)


def cross_entropy(logits, labels):
    logits = _rows(logits)
    total = 0.0
    for row, y in zip(logits, labels):
        total -= math.log(softmax_row(row)[int(y)])
    return total / len(logits)


def within_stream(backbone_logits, backbone_feature, head_logits, head_features, temperature):
    l_d = 0.0
    for logits in head_logits:
        l_d += kl(logits, backbone_logits, temperature)
    l_f = 0.0
    for feat in head_features:
        l_f += l2(feat, backbone_feature)
    return l_d, l_f


def cross_stream(t_logits, t_head_logits, t_head_features, s_logits, s_head_logits, s_head_features,
                 temperature):
    l_g1 = kl(s_logits, t_logits, temperature)
    for s, t in zip(s_head_logits, t_head_logits):
        l_g1 += kl(s, t, temperature)
    l_g2 = 0.0
    for s, t in zip(s_head_features, t_head_features):
        l_g2 += l2(s, t)
    return l_g1, l_g2


def classification(all_logits, labels):
    return sum(cross_entropy(logits, labels) for logits in all_logits)
