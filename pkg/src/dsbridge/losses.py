"""Training objectives.

Every log is taken of ``max(p, 1e-12)`` so saturated single-precision
softmax outputs stay finite. Teacher-side distributions are always treated as
constants.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ROW_TOL = 1e-5
PARTS = ("pce", "scl", "st")


def _safe_log(p: Tensor) -> Tensor:
    return T.log(T.clip_min(p, PROB_FLOOR))


def _check_rows(p, name: str) -> np.ndarray:
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected [B, C] probabilities, got shape {arr.shape}")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > ROW_TOL):
        raise ValueError(f"{name}: rows must sum to 1")
    return arr


def pce(logits: Tensor, labels) -> Tensor:
    """Proxy cross-entropy: batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    picked = T.pick(T.softmax(logits), labels)
    return T.neg(T.mean(_safe_log(picked)))


def scl(embeddings: Tensor, labels, tau: float = 1.0) -> Tensor:
    """Supervised contrastive loss over a joint batch of unit embeddings.

    For each anchor ``i`` with at least one positive, the loss averages
    ``-log(exp(s_ip / tau) / sum_{j != i} exp(s_ij / tau))`` over its positives
    ``p``; anchors are then averaged. Anchors with no positive are skipped.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("scl needs at least two samples")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    norms = np.linalg.norm(embeddings.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ValueError("scl expects unit-norm embeddings")

    offdiag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & offdiag
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        log.warning("scl: no anchor has a positive pair; returning 0")
        return T.scale(T.sum(embeddings), 0.0)

    dtype = embeddings.dtype
    sim = T.scale(T.matmul(embeddings, T.transpose(embeddings)), 1.0 / tau)
    # constant shift per row for stability; cancels inside the log-ratio
    shift = Tensor(np.where(offdiag, sim.data, -np.inf).max(axis=1, keepdims=True).repeat(n, axis=1))
    logits = sim - shift
    denom = T.sum(T.exp(logits) * Tensor(offdiag.astype(dtype)), axes=1, keepdims=True)
    log_prob = logits - T.broadcast_to(T.log(denom), (n, n))
    weights = np.where(anchors[:, None], pos / np.maximum(counts, 1)[:, None], 0.0)
    per_anchor = T.sum(log_prob * Tensor(weights.astype(dtype)), axes=1)
    return T.neg(T.scale(T.sum(per_anchor), 1.0 / anchors.sum()))


def symmetric_ce(p: Tensor, q) -> Tensor:
    """Batch mean of ``-sum q log p - sum p log q``; ``q`` is a detached teacher output."""
    _check_rows(p, "student probs")
    q_arr = _check_rows(q, "teacher probs")
    if q_arr.shape != p.shape:
        raise ValueError(f"student {p.shape} and teacher {q_arr.shape} differ")
    q_t = Tensor(np.asarray(q_arr, dtype=p.dtype))
    log_q = Tensor(np.log(np.maximum(q_t.data, PROB_FLOOR)))
    per_row = T.sum(q_t * _safe_log(p) + p * log_q, axes=1)
    return T.neg(T.mean(per_row))


def entropy(p: Tensor) -> Tensor:
    """Batch mean Shannon entropy of probability rows."""
    _check_rows(p, "probs")
    return T.neg(T.mean(T.sum(p * _safe_log(p), axes=1)))


@dataclass(frozen=True)
class LossBreakdown:
    pce: float | None
    scl: float | None
    st: float | None
    total: float

    def as_row(self) -> dict[str, float]:
        """Disabled parts are reported as 0."""
        return {
            "loss_pce": self.pce or 0.0,
            "loss_scl": self.scl or 0.0,
            "loss_st": self.st or 0.0,
            "loss_total": self.total,
        }


def total(parts: Iterable[str], values: Mapping[str, Tensor | float]) -> tuple[Tensor | float, LossBreakdown]:
    """Unweighted sum of the enabled parts.

    Returns the summed objective (a tensor when the inputs are tensors) and the
    float breakdown; disabled parts are recorded as ``None``.
    """
    enabled = [p for p in PARTS if p in set(parts)]
    unknown = set(parts) - set(PARTS)
    if unknown:
        raise ValueError(f"unknown loss parts {sorted(unknown)}")
    if not enabled:
        raise ValueError("at least one loss part must be enabled")

    def as_float(v) -> float:
        return float(v.data) if isinstance(v, Tensor) else float(v)

    acc = None
    for name in enabled:
        v = values[name]
        acc = v if acc is None else acc + v
    floats = {name: as_float(values[name]) for name in enabled}
    for name, v in floats.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name} is not finite")
    breakdown = LossBreakdown(
        pce=floats.get("pce"),
        scl=floats.get("scl"),
        st=floats.get("st"),
        total=as_float(acc),
    )
    return acc, breakdown
