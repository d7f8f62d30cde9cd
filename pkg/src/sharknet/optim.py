"""Sparse categorical cross-entropy and the Adam update rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError
from .tensor import Tensor, _softmax, record


def sparse_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Uses log-sum-exp; the gradient w.r.t. the logits is
    ``(softmax(logits) - onehot(labels)) / N``.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} at row {bad[0]} is outside [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def bw(g):
        grad = _softmax(logits.data)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return record(loss, (logits,), bw)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, grads, state: AdamState, cfg, names=None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``cfg`` supplies ``learning_rate``, ``beta1``, ``beta2`` and ``epsilon``.
    """
    if not state.m:
        fresh = AdamState.like(params)
        state.m, state.v = fresh.m, fresh.v
    names = names or [str(i) for i in range(len(params))]
    for name, g in zip(names, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    return state
