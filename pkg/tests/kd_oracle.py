"""Scalar oracles for the distillation algebra.

Pure-python math.* loops over class lists: independent of both numpy
vectorization and the tensor graph implementations they check.
"""

from __future__ import annotations

import math


def softmax_row(logits: list[float], temperature: float) -> list[float]:
    z = [v / temperature for v in logits]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def log_softmax_row(logits: list[float], temperature: float) -> list[float]:
    z = [v / temperature for v in logits]
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def cross_entropy_row(true_class: int, logits: list[float]) -> float:
    return -log_softmax_row(logits, 1.0)[true_class]


def kl_rows(p: list[float], q: list[float]) -> float:
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * (math.log(pi) - math.log(qi))
    return total


def distillation_row(s: list[float], t: list[float], temperature: float,
                     direction: str = "student_to_teacher") -> float:
    p = softmax_row(s, temperature)
    q = softmax_row(t, temperature)
    if direction == "student_to_teacher":
        kl = kl_rows(p, q)
    else:
        kl = kl_rows(q, p)
    return temperature * temperature * kl


def final_batch(y: list[int], s_rows: list[list[float]], t_rows: list[list[float]],
                temperature: float, alpha: float,
                direction: str = "student_to_teacher") -> float:
    n = len(y)
    hard = sum(cross_entropy_row(y[i], s_rows[i]) for i in range(n)) / n
    soft = sum(distillation_row(s_rows[i], t_rows[i], temperature, direction) for i in range(n)) / n
    return alpha * hard + (1.0 - alpha) * soft
