"""Unsupervised adaptation losses with their gradients w.r.t. the logits.

All functions work row-wise on ``(..., K)`` probability arrays and return
per-sample values. Gradients are analytic, composed through the softmax.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

DEFAULT_PL_THRESHOLD = 0.4
DEFAULT_ENTW_FACTOR = 0.4


class LossKind(str, enum.Enum):
    ENTROPY = "entropy"
    PL = "pl"
    ENTW = "ent-w"
    # test-only: 0.5 * ||logits||^2, exact for central differences
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class LossSpec:
    """``tau`` is a probability threshold for PL and a multiple of ``ln K`` for Ent-W."""

    kind: LossKind = LossKind.ENTROPY
    tau: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.tau is not None and self.tau < 0:
            raise ValueError("loss threshold must be non-negative")

    def threshold(self, num_classes: int) -> float:
        if self.kind is LossKind.PL:
            return DEFAULT_PL_THRESHOLD if self.tau is None else self.tau
        if self.kind is LossKind.ENTW:
            factor = DEFAULT_ENTW_FACTOR if self.tau is None else self.tau
            return factor * math.log(num_classes)
        return 0.0


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    return -np.sum(xlogy(p, p), axis=-1)


def entropy_loss(p):
    """Shannon entropy and its logit gradient ``-p_j (log p_j + H)``."""
    p = np.asarray(p, dtype=np.float64)
    h = entropy(p)
    grad = -(xlogy(p, p) + p * h[..., None])
    return h, grad


def pl_loss(p, tau=DEFAULT_PL_THRESHOLD):
    """Confidence-gated cross-entropy against the argmax pseudo label."""
    p = np.asarray(p, dtype=np.float64)
    k = np.argmax(p, axis=-1)
    pk = np.take_along_axis(p, k[..., None], axis=-1)[..., 0]
    used = pk >= tau
    loss = np.where(used, -np.log(np.where(used, pk, 1.0)), 0.0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, k[..., None], 1.0, axis=-1)
    grad = np.where(used[..., None], p - onehot, 0.0)
    return loss, grad, used


def entw_coefficient(h, tau_h):
    """Gate ``H < tau_h`` and the (detached) weight ``exp(tau_h - H)``."""
    used = h < tau_h
    return used, np.where(used, np.exp(tau_h - h), 0.0)


def entw_loss(p, tau_h):
    """Entropy of low-entropy samples, scaled by ``exp(tau_h - H)``.

    The scale is treated as a constant in the gradient.
    """
    h, g = entropy_loss(p)
    used, coef = entw_coefficient(h, tau_h)
    return coef * h, coef[..., None] * g, used


@dataclass(frozen=True)
class LossEval:
    loss: np.ndarray
    grad: np.ndarray
    used: np.ndarray
    labels: np.ndarray
    coef: np.ndarray


def evaluate(spec: LossSpec, logits, probs, frozen: LossEval | None = None) -> LossEval:
    """Per-sample loss for a batch.

    With ``frozen`` the gates, pseudo labels and Ent-W weights of an earlier
    evaluation are reused, which is what the stop-gradient reading of the
    losses means for a finite-difference oracle.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    labels = np.argmax(probs, axis=1) if frozen is None else frozen.labels
    if spec.kind is LossKind.ENTROPY:
        loss, grad = entropy_loss(probs)
        return LossEval(loss, grad, np.ones(n, bool), labels, np.ones(n))
    if spec.kind is LossKind.QUADRATIC:
        z = np.asarray(logits, dtype=np.float64)
        return LossEval(0.5 * np.sum(z * z, axis=1), z.copy(), np.ones(n, bool), labels, np.ones(n))
    if spec.kind is LossKind.PL:
        if frozen is None:
            loss, grad, used = pl_loss(probs, spec.threshold(k))
            return LossEval(loss, grad, used, labels, used.astype(float))
        pk = probs[np.arange(n), labels]
        loss = np.where(frozen.used, -np.log(pk), 0.0)
        return LossEval(loss, np.zeros_like(probs), frozen.used, labels, frozen.coef)
    if spec.kind is LossKind.ENTW:
        h, g = entropy_loss(probs)
        if frozen is None:
            used, coef = entw_coefficient(h, spec.threshold(k))
        else:
            used, coef = frozen.used, frozen.coef
        return LossEval(coef * h, coef[:, None] * g, used, labels, coef)
    raise ValueError(f"unknown loss {spec.kind}")
