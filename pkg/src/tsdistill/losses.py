"""Loss values and their gradients with respect to logits.

Four training regimes are covered: plain cross-entropy, cross-entropy with
label smoothing, distillation against tempered teacher labels, and
distillation against calibrated teacher labels (pure KL, no temperature,
no mixing weight).

Per-sample operations take label vectors and report the gradient of the
loss with respect to the logits that produced the predicted label (the
softmax is folded into the loss, so no division by probabilities ever
happens on the gradient path). :func:`batch_loss_and_grad` is the fused
form used by the training loop: it starts from raw logits, uses a stable
log-softmax, and reduces by mean over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labelspace import as_label, is_one_hot, smooth_hard_label

__all__ = [
    "LossKind",
    "LossValue",
    "ce_loss",
    "ls_loss",
    "kl_div",
    "kd_loss",
    "kdc_loss",
    "log_softmax",
    "batch_loss_and_grad",
]

_LOG_GUARD = 1e-12  # evaluation-path guard; the fused training path never logs a zero


@dataclass(frozen=True)
class LossKind:
    """Which training objective to optimize.

    ``kind`` is one of ``"ce"``, ``"ls"``, ``"kd"``, ``"kdc"``. ``eps``
    weights the soft part for ls/kd; ``tau`` is the distillation
    temperature for kd. kdc has no hyperparameters.
    """

    kind: str
    eps: float = 0.0
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("ce", "ls", "kd", "kdc"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must lie in [0, 1], got {self.eps}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def cross_entropy(cls) -> "LossKind":
        return cls("ce")

    @classmethod
    def label_smoothing(cls, eps: float = 0.5) -> "LossKind":
        return cls("ls", eps=eps)

    @classmethod
    def distillation(cls, eps: float = 0.5, tau: float = 8.0) -> "LossKind":
        return cls("kd", eps=eps, tau=tau)

    @classmethod
    def calibrated_distillation(cls) -> "LossKind":
        return cls("kdc")


@dataclass(frozen=True)
class LossValue:
    """A scalar loss together with its gradient w.r.t. the logits."""

    value: float
    grad_logits: np.ndarray


def ce_loss(y_h, y_hat) -> LossValue:
    """Cross-entropy of a prediction against a one-hot label.

    Only the predicted probability of the true class survives the sum, so
    the value is ``-log(y_hat_c)``; the logits gradient is the classic
    ``y_hat - y_h``.
    """
    h, p = as_label(y_h), as_label(y_hat)
    if not is_one_hot(h):
        raise ValueError("ce_loss expects a one-hot true label")
    c = int(np.argmax(h))
    if p[c] <= 0.0:
        raise ValueError(f"predicted probability of the true class is 0 (class {c}); loss is infinite")
    return LossValue(value=float(-np.log(p[c])), grad_logits=p - h)


def ls_loss(y_h, y_hat, eps: float) -> LossValue:
    """Cross-entropy against a smoothed label, decomposed as
    ``(1-eps)*CE(hard) + eps*(-mean(log y_hat))``.

    Identical to plain cross-entropy against ``smooth_hard_label(y_h, eps)``.
    """
    h, p = as_label(y_h), as_label(y_hat)
    if not is_one_hot(h):
        raise ValueError("ls_loss expects a one-hot true label")
    if np.any(p <= 0.0):
        raise ValueError("ls_loss needs strictly positive predicted probabilities")
    smoothed = smooth_hard_label(h, eps)
    c = int(np.argmax(h))
    hard_part = -float(np.log(p[c]))
    soft_part = -float(np.mean(np.log(p)))
    return LossValue(value=(1.0 - eps) * hard_part + eps * soft_part, grad_logits=p - smoothed)


def kl_div(p, q) -> LossValue:
    """KL divergence ``sum p_i log(p_i / q_i)`` with ``0 log 0 := 0``.

    Nonnegative, zero iff the arguments are equal. The gradient is taken
    w.r.t. the logits behind ``q`` (the direction the student moves), which
    is ``q - p``.
    """
    pp, qq = as_label(p), as_label(q)
    if pp.size != qq.size:
        raise ValueError(f"dimension mismatch: {pp.size} vs {qq.size}")
    support = pp > 0.0
    if np.any(qq[support] == 0.0):
        raise ValueError("kl_div undefined: q has a zero where p has mass")
    value = float(np.sum(pp[support] * np.log(pp[support] / qq[support])))
    return LossValue(value=max(value, 0.0), grad_logits=qq - pp)


def kd_loss(y_h, y_hat, y_t_tau, y_hat_tau, eps: float, tau: float) -> LossValue:
    """Distillation objective: ``(1-eps)*CE(y_h, y_hat) + eps*tau^2*KL(y_t_tau, y_hat_tau)``.

    ``y_hat`` and ``y_hat_tau`` must come from the same student logits
    (plain and tempered softmax respectively); the returned gradient flows
    through both back to those logits. The ``tau^2`` factor undoes the
    1/tau^2 shrinkage of the tempered-KL gradient so neither term dominates.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    hard = ce_loss(y_h, y_hat)
    soft = kl_div(y_t_tau, y_hat_tau)
    value = (1.0 - eps) * hard.value + eps * tau * tau * soft.value
    # d/dz of the tempered KL term carries a 1/tau from the inner softmax
    grad = (1.0 - eps) * hard.grad_logits + eps * tau * soft.grad_logits
    return LossValue(value=value, grad_logits=grad)


def kdc_loss(y_t_zeta, y_hat) -> LossValue:
    """Distillation against a calibrated teacher label: pure KL divergence,
    no temperature, no mixing weight."""
    return kl_div(y_t_zeta, y_hat)


# ---------------------------------------------------------------------------
# fused batch forms (logits in, mean-reduced value + gradient out)
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-subtraction, for (B, C) logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _mean_kl_rows(targets: np.ndarray, logp: np.ndarray) -> float:
    """Mean over rows of KL(target || softmax) given log-probabilities."""
    t = targets
    ent = np.where(t > 0.0, t * np.log(np.maximum(t, _LOG_GUARD)), 0.0).sum(axis=1)
    cross = -(t * logp).sum(axis=1)
    return float(np.mean(ent + cross))


def batch_loss_and_grad(
    kind: LossKind,
    logits: np.ndarray,
    targets: np.ndarray,
    teacher_logits: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean loss over a batch and its gradient w.r.t. the logits.

    ``targets`` holds one-hot rows for ce/ls/kd and calibrated teacher
    labels for kdc. ``teacher_logits`` is required for kd only; tempered
    teacher labels are derived from it here so a cached teacher forward
    pass is enough.

    The returned gradient is for the mean-reduced loss, i.e. per-sample
    gradients divided by the batch size.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)

    if kind.kind == "ce":
        value = float(np.mean(-(targets * logp).sum(axis=1)))
        grad = (p - targets) / n
    elif kind.kind == "ls":
        smoothed = (1.0 - kind.eps) * targets + kind.eps / targets.shape[1]
        value = float(np.mean(-(smoothed * logp).sum(axis=1)))
        grad = (p - smoothed) / n
    elif kind.kind == "kd":
        if teacher_logits is None:
            raise ValueError("kd loss needs teacher logits")
        tau = kind.tau
        t_tau = np.exp(log_softmax(np.asarray(teacher_logits, dtype=np.float64) / tau))
        logp_tau = log_softmax(logits / tau)
        p_tau = np.exp(logp_tau)
        hard_value = float(np.mean(-(targets * logp).sum(axis=1)))
        soft_value = _mean_kl_rows(t_tau, logp_tau)
        value = (1.0 - kind.eps) * hard_value + kind.eps * tau * tau * soft_value
        grad = ((1.0 - kind.eps) * (p - targets) + kind.eps * tau * (p_tau - t_tau)) / n
    elif kind.kind == "kdc":
        value = _mean_kl_rows(targets, logp)
        grad = (p - targets) / n
    else:  # pragma: no cover - LossKind validates on construction
        raise ValueError(f"unknown loss kind {kind.kind!r}")
    return value, grad
