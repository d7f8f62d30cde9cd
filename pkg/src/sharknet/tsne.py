"""Exact t-SNE: perplexity calibration, symmetric affinities, KL descent."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, SharkNetError
from .rng import make_rng

logger = logging.getLogger(__name__)

P_FLOOR = 1e-12


class TsneError(SharkNetError):
    exit_code = 3


class CalibrationWarning(UserWarning):
    pass


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    exaggeration_factor: float = 12.0
    exaggeration_iters: int = 250
    constant_exaggeration: bool = False
    total_iters: int = 1000
    learning_rate: Optional[float] = None
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch_iter: int = 250
    min_gain: float = 0.01
    seed: int = 0
    output_dims: int = 2

    def __post_init__(self):
        if self.perplexity <= 1:
            raise ValueError("perplexity must exceed 1")
        if self.exaggeration_factor < 1:
            raise ValueError("exaggeration_factor must be >= 1")
        if self.total_iters < self.exaggeration_iters:
            raise ValueError("total_iters must be >= exaggeration_iters")


@dataclass
class Embedding:
    coords: np.ndarray
    kl: float
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write_csv(self, path, labels=None, class_names=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "label"])
            for i, (x, y) in enumerate(self.coords):
                lab = "" if labels is None else labels[i]
                if class_names is not None and labels is not None:
                    lab = class_names[int(lab)]
                w.writerow([repr(float(x)), repr(float(y)), lab])

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "kl"])
            for it, kl in self.trace:
                w.writerow([it, repr(float(kl))])


def standardize(x: np.ndarray) -> tuple:
    """Zero-mean, unit-variance columns; constant columns keep std 1."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    const = sd == 0
    if const.any():
        warnings.warn(f"{int(const.sum())} constant feature column(s) left unscaled")
        sd = np.where(const, 1.0, sd)
    return (x - mu) / sd, mu, sd


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_stats(d: np.ndarray, beta: np.ndarray) -> tuple:
    # d: shifted distances with the diagonal at +inf
    w = np.exp(-beta[:, None] * d)
    z = w.sum(axis=1)
    p = w / z[:, None]
    dfin = np.where(np.isfinite(d), d, 0.0)
    h_nats = np.log(z) + beta * (p * dfin).sum(axis=1)
    return p, h_nats / np.log(2.0)


def conditional_affinities(dist: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_steps: int = 64) -> tuple:
    """Row-wise Gaussian conditionals ``p_{j|i}`` with ``2**H_i == perplexity``.

    Bisects each row's precision (all rows at once) until the achieved
    perplexity is within ``tol``.  Returns ``(P_cond, achieved_perplexity)``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if not np.all(np.isfinite(dist)):
        raise DataError("pairwise distances must be finite")
    if not 1 < perplexity < n:
        raise ValueError(f"perplexity must be in (1, {n}), got {perplexity}")
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    d -= d.min(axis=1, keepdims=True)
    np.fill_diagonal(d, np.inf)
    spread = np.where(np.isfinite(d), d, np.nan)
    scale = np.nanmean(spread, axis=1)
    beta = np.where(scale > 0, 1.0 / np.where(scale > 0, scale, 1.0), 1.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    target = np.log2(perplexity)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        p, h = _row_stats(d, beta)
        done = np.abs(2.0 ** h - perplexity) < tol
        if done.all():
            break
        too_flat = (h > target) & ~done
        too_peaked = (h < target) & ~done
        lo = np.where(too_flat, beta, lo)
        hi = np.where(too_peaked, beta, hi)
        beta = np.where(too_flat, np.where(np.isinf(hi), beta * 2.0, (beta + hi) / 2.0), beta)
        beta = np.where(too_peaked, (beta + lo) / 2.0, beta)
    p, h = _row_stats(d, beta)
    achieved = 2.0 ** h
    bad = np.abs(achieved - perplexity) >= tol
    if bad.any():
        warnings.warn(f"perplexity bisection did not converge for {int(bad.sum())} row(s)", CalibrationWarning)
    np.fill_diagonal(p, 0.0)
    return p, achieved


def symmetrize(p_cond: np.ndarray) -> np.ndarray:
    """``(P + P.T) / 2N`` with off-diagonal entries floored at 1e-12, summing to 1."""
    n = p_cond.shape[0]
    p = (p_cond + p_cond.T) / (2.0 * n)
    off = ~np.eye(n, dtype=bool)
    low = off & (p < P_FLOOR)
    if low.any():
        rest = off & ~low
        p[low] = P_FLOOR
        p[rest] *= (1.0 - P_FLOOR * low.sum()) / p[rest].sum()
        np.maximum(p, P_FLOOR, out=p, where=off)
    np.fill_diagonal(p, 0.0)
    return p


def calibrate_affinities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5,
                         max_steps: int = 64) -> np.ndarray:
    """Symmetric joint affinities for the rows of ``x``."""
    p_cond, _ = conditional_affinities(squared_distances(np.asarray(x, dtype=np.float64)),
                                       perplexity, tol, max_steps)
    return symmetrize(p_cond)


def student_t_affinities(y: np.ndarray) -> tuple:
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return q, num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """``sum p log(p/q)`` over off-diagonal entries, both floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    off = ~np.eye(p.shape[0], dtype=bool)
    pp = np.maximum(p[off], P_FLOOR)
    qq = np.maximum(q[off], P_FLOOR)
    return float(np.sum(pp * np.log(pp / qq)))


def tsne(p: np.ndarray, cfg: TsneConfig = None) -> Embedding:
    """Embed a joint affinity matrix with momentum gradient descent on KL(P||Q).

    Uses per-coordinate adaptive gains.  P is multiplied by the exaggeration
    factor for the first ``exaggeration_iters`` iterations (or throughout,
    with ``constant_exaggeration``).  KL against the true P is recorded every
    10 iterations and at the end.
    """
    cfg = cfg or TsneConfig()
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    if p.shape != (n, n) or not np.allclose(p, p.T, atol=1e-12) or (p < 0).any():
        raise ValueError("P must be a square, symmetric, non-negative matrix")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"P must sum to 1, got {p.sum()}")
    rng = make_rng(cfg.seed, "tsne-init")
    y = rng.normal(0.0, 1e-2, size=(n, cfg.output_dims))
    lr = cfg.learning_rate if cfg.learning_rate is not None else max(n / 12.0, 50.0)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = []
    for it in range(cfg.total_iters):
        q, num = student_t_affinities(y)
        if it % 10 == 0:
            trace.append((it, kl_divergence(p, q)))
        exag = cfg.exaggeration_factor if (cfg.constant_exaggeration or it < cfg.exaggeration_iters) else 1.0
        pq = (exag * p - np.maximum(q, P_FLOOR)) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        mom = cfg.initial_momentum if it < cfg.momentum_switch_iter else cfg.final_momentum
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = mom * update - lr * gains * grad
        y = y + update
        if not np.all(np.isfinite(y)):
            raise TsneError(f"non-finite embedding coordinates at iteration {it}")
    q, _ = student_t_affinities(y)
    kl = kl_divergence(p, q)
    trace.append((cfg.total_iters, kl))
    return Embedding(y, kl, trace, asdict(cfg))


def label_agreement(coords: np.ndarray, labels) -> float:
    """Fraction of points whose nearest class centroid is their own class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centroids = np.stack([coords[labels == c].mean(axis=0) for c in classes])
    d = ((coords[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[d.argmin(axis=1)] == labels))
