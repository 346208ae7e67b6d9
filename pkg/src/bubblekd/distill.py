"""Temperature-scaled knowledge-distillation losses and prediction.

Student and teacher logits are tempered by T; the student side is kept
in log space throughout (log-softmax) and only exponentiated inside the
KL term, which keeps the loss finite for any finite logits. The
distillation term carries the T^2 factor so its gradient magnitude
stays comparable across temperatures. With alpha = 1 the mixed loss
reduces exactly to plain cross-entropy (the standalone baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, LabelError, ParameterError, ShapeError
from .tensor import Tensor

STUDENT_TO_TEACHER = "student_to_teacher"
TEACHER_TO_STUDENT = "teacher_to_student"
_DIRECTIONS = (STUDENT_TO_TEACHER, TEACHER_TO_STUDENT)


@dataclass(frozen=True)
class KDConfig:
    """Distillation knobs: temperature, mixing weight, KL direction.

    beta is always 1 - alpha and never stored separately. The
    standalone (no-teacher) baseline is exactly (alpha=1, temperature=1).
    """

    temperature: float = 1.0
    alpha: float = 1.0
    kl_direction: str = STUDENT_TO_TEACHER

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.kl_direction not in _DIRECTIONS:
            raise ParameterError(
                f"kl_direction must be one of {_DIRECTIONS}, got {self.kl_direction!r}"
            )

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    @property
    def is_standalone(self) -> bool:
        return self.alpha == 1.0 and self.temperature == 1.0


@dataclass
class ProbPair:
    """Student log-probabilities and teacher probabilities at temperature T."""

    p_student: Tensor  # log-softmax of student logits / T
    p_teacher: Tensor  # softmax of teacher logits / T


def _check_logit_pair(s: Tensor, t: Tensor) -> None:
    if s.ndim != 2 or t.ndim != 2:
        raise ContractError(f"expected batch x classes logits, got {s.shape} and {t.shape}")
    if s.shape != t.shape:
        raise ShapeError(f"student logits {s.shape} do not match teacher logits {t.shape}")


def class_probabilities(s: Tensor, t: Tensor, temperature: float) -> ProbPair:
    """Tempered class distributions of both models."""
    _check_logit_pair(s, t)
    return ProbPair(
        p_student=T.log_softmax(s, axis=-1, temperature=temperature),
        p_teacher=T.softmax(t, axis=-1, temperature=temperature),
    )


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelError(f"labels must be a 1-D vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 2:
        raise LabelError(f"one-hot labels must be 2-D, got shape {y.shape}")
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)
    if not ok:
        raise LabelError("each label row must be one-hot")


def student_loss(y, s: Tensor) -> Tensor:
    """Cross-entropy against hard targets, temperature fixed at 1.

    Mean over the batch of the negative log-probability the student
    assigns to the true class.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    _check_one_hot(y_arr)
    if y_arr.shape != s.shape:
        raise ShapeError(f"labels {y_arr.shape} do not match logits {s.shape}")
    logp = T.log_softmax(s, axis=-1, temperature=1.0)
    picked = T.tensor_sum(T.mul(logp, Tensor(y_arr.astype(s.data.dtype))), axis=-1)
    return -T.tensor_mean(picked)


def distillation_loss(s: Tensor, t: Tensor, cfg: KDConfig) -> Tensor:
    """T^2-scaled KL divergence between the tempered distributions.

    The teacher side is detached: gradients reach student parameters
    only. Batch reduction is the mean.
    """
    _check_logit_pair(s, t)
    temp = cfg.temperature
    t_const = Tensor(t.data)  # frozen teacher: values only, no graph
    p_log = T.log_softmax(s, axis=-1, temperature=temp)
    with T.no_grad():
        q_log_arr = T.log_softmax(t_const, axis=-1, temperature=temp).data
    q_log = Tensor(q_log_arr)
    if cfg.kl_direction == STUDENT_TO_TEACHER:
        # KL(P_student || P_teacher) = sum P (log P - log Q)
        per_class = T.mul(T.exp(p_log), T.sub(p_log, q_log))
    else:
        # KL(P_teacher || P_student) = sum Q (log Q - log P)
        q = Tensor(np.exp(q_log_arr))
        per_class = T.mul(q, T.sub(q_log, p_log))
    per_row = T.tensor_sum(per_class, axis=-1)
    return T.tensor_mean(per_row) * (temp * temp)


def final_loss(y, s: Tensor, t: Tensor | None, cfg: KDConfig) -> Tensor:
    """alpha-weighted mix of the hard-target and distillation losses.

    With alpha = 1 this is exactly student_loss and the teacher logits
    are not touched at all.
    """
    if cfg.alpha == 1.0:
        return student_loss(y, s)
    if t is None:
        raise ContractError("final_loss with alpha < 1 needs teacher logits")
    hard = student_loss(y, s)
    soft = distillation_loss(s, t, cfg)
    return hard * cfg.alpha + soft * cfg.beta


def predict(s) -> np.ndarray:
    """Per-row argmax of softmax(s, T=1); ties go to the lowest index."""
    arr = s.data if isinstance(s, Tensor) else np.asarray(s)
    if arr.ndim != 2:
        raise ContractError(f"expected batch x classes logits, got shape {arr.shape}")
    return np.argmax(arr, axis=1)
