"""Classification and distillation loss kernels.

All kernels are batch means, numerically stabilised via max-subtraction, and
come in value-only and value-plus-logit-gradient flavours. The composite
client objective sums a cross-entropy term for the client model, a
cross-entropy term for its local expert, and a temperature-scaled KL term
that pulls the client's softened distribution toward the expert's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class LossSpec:
    """Term selection for the composite objective.

    classification: cross-entropy of the client model on its logits.
    expert: cross-entropy of the local expert on its own logits.
    distill: KL regulariser from expert (teacher) to client (student); the
        teacher side never receives gradients.
    """

    classification: bool = True
    expert: bool = True
    distill: bool = True
    temperature: float = 3.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InputError(f"temperature must be > 0, got {self.temperature}")


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InputError(f"logits must be a [B, Z] matrix with B >= 1, got shape {logits.shape}")
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    value, _ = cross_entropy_with_grad(logits, labels)
    return value


def cross_entropy_with_grad(logits, labels) -> tuple[float, np.ndarray]:
    logits = _check_logits(logits)
    labels = np.asarray(labels)
    b, z = logits.shape
    if labels.shape != (b,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {b}")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= z:
        raise InputError(f"labels must lie in [0, {z}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return value, grad


def soften(logits, temperature: float) -> np.ndarray:
    """Row-wise softmax of logits/temperature."""
    logits = _check_logits(logits)
    if not temperature > 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    return np.exp(_log_softmax(logits / temperature))


def kd_kl(student_logits, teacher_logits, temperature: float) -> float:
    """Temperature-scaled distillation divergence, teacher -> student.

    Mean over the batch of T^2 * KL(soften(teacher) || soften(student)).
    The teacher distribution is treated as a constant.
    """
    value, _ = kd_kl_with_grad(student_logits, teacher_logits, temperature)
    return value


def kd_kl_with_grad(student_logits, teacher_logits, temperature: float) -> tuple[float, np.ndarray]:
    student = _check_logits(student_logits)
    teacher = _check_logits(teacher_logits)
    if student.shape != teacher.shape:
        raise InputError(f"student shape {student.shape} != teacher shape {teacher.shape}")
    if not temperature > 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    t = float(temperature)
    logp = _log_softmax(student / t)
    logq = _log_softmax(teacher / t)
    q = np.exp(logq)
    rows = (q * (logq - logp)).sum(axis=1)
    # KL is non-negative; clip the odd -1e-17 from cancellation.
    rows = np.maximum(rows, 0.0)
    value = float(t * t * rows.mean())
    b = student.shape[0]
    grad = t * (np.exp(logp) - q) / b
    return value, grad


def client_loss(client_logits, expert_logits, labels, spec: LossSpec) -> tuple[float, dict]:
    """Composite objective value and its per-term breakdown.

    Returns (total, components) with components keyed loss_c / loss_e /
    loss_r; disabled terms report 0. Gradient routing is the caller's job:
    loss_c and loss_r drive the client model, loss_e drives the expert only.
    """
    comps = {"loss_c": 0.0, "loss_e": 0.0, "loss_r": 0.0}
    if spec.classification:
        if client_logits is None:
            raise InputError("classification term enabled but client logits missing")
        comps["loss_c"] = cross_entropy(client_logits, labels)
    if spec.expert:
        if expert_logits is None:
            raise InputError("expert term enabled but expert logits missing")
        comps["loss_e"] = cross_entropy(expert_logits, labels)
    if spec.distill:
        if client_logits is None or expert_logits is None:
            raise InputError("distillation term enabled but client or expert logits missing")
        comps["loss_r"] = kd_kl(client_logits, expert_logits, spec.temperature)
    total = comps["loss_c"] + comps["loss_e"] + comps["loss_r"]
    return total, comps
