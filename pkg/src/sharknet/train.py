"""Training loop with early stopping, k-fold cross-validation and random search."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import ImageSet, make_folds, stratified_split
from .errors import ConfigError
from .metrics import mean_std
from .model import Model, forward, predict_logits
from .optim import AdamState, adam_step, sparse_ce_loss
from .rng import make_rng
from .tensor import Graph

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    monitor: str = "val_loss"
    patience: int = 10
    restore_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ConfigError(f"unknown monitor {self.monitor!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class LearningCurve:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    monitor: str = "val_loss"
    stopped_early: bool = False

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_accuracy:.6f}",
                            f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}"])


def evaluate(model: Model, data: ImageSet, batch_size: int = 256) -> tuple:
    """(mean loss, accuracy) in inference mode."""
    logits = predict_logits(model, data.images, batch_size)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(z)), data.labels]))
    acc = float(np.mean(logits.argmax(axis=1) == data.labels))
    return loss, acc


def _improved(monitor: str, value: float, best: Optional[float]) -> bool:
    if best is None:
        return True
    return value < best if monitor == "val_loss" else value > best


def train(model: Model, train_set: ImageSet, val_set: ImageSet, cfg: TrainConfig,
          on_epoch: Optional[Callable] = None) -> tuple:
    """Fit ``model`` with Adam on mini-batches; returns ``(model, LearningCurve)``.

    Training order is reshuffled every epoch from ``cfg.seed``.  Validation
    runs in inference mode after each epoch.  Early stopping halts once the
    monitored metric has not improved for ``patience`` consecutive epochs
    (at least one) and optionally restores the best weights.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    params = [t for _, _, t in model.parameters]
    names = [n for n, _ in model.named_parameters]
    state = AdamState.like(params)
    shuffle_rng = make_rng(cfg.seed, "shuffle")
    dropout_rng = make_rng(cfg.seed, "train-dropout")
    curve = LearningCurve(monitor=cfg.monitor)
    best_value, best_state, wait = None, None, 0
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            with Graph().recording() as graph:
                logits = forward(model, train_set.images[idx], dropout_rng)
                loss = sparse_ce_loss(logits, train_set.labels[idx])
            graph.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg, names)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == train_set.labels[idx]).sum())
        model.eval()
        val_loss, val_acc = evaluate(model, val_set)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc)
        curve.records.append(rec)
        logger.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch,
                    rec.train_loss, rec.train_accuracy, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        value = val_loss if cfg.monitor == "val_loss" else val_acc
        if _improved(cfg.monitor, value, best_value):
            best_value, wait, curve.best_epoch = value, 0, epoch
            if cfg.restore_best:
                best_state = model.state()
        else:
            wait += 1
            if wait >= max(cfg.patience, 1):
                curve.stopped_early = True
                break
    if cfg.restore_best and best_state is not None:
        model.load_state(best_state)
    model.zero_grad()
    model.eval()
    return model, curve


# -- cross-validation ---------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    val_accuracy: float
    test_accuracy: float
    curve: LearningCurve


@dataclass
class CVResult:
    folds: list
    topology: str

    @property
    def val_scores(self) -> list:
        return [100.0 * f.val_accuracy for f in self.folds]

    @property
    def test_scores(self) -> list:
        return [100.0 * f.test_accuracy for f in self.folds]

    def summary(self) -> dict:
        vm, vs = mean_std(self.val_scores)
        tm, ts = mean_std(self.test_scores)
        return {"val_mean": vm, "val_std": vs, "test_mean": tm, "test_std": ts}

    def write_csv(self, path) -> None:
        """Fold table: one row per fold (2 d.p.) and an ``Overall`` row (1 d.p.)."""
        s = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["CV fold", "Validation", "Test"])
            for f, v, t in zip(self.folds, self.val_scores, self.test_scores):
                w.writerow([f.fold, f"{v:.2f}", f"{t:.2f}"])
            w.writerow(["Overall", f"{s['val_mean']:.1f}% (std {s['val_std']:.1f}%)",
                        f"{s['test_mean']:.1f}% (std {s['test_std']:.1f}%)"])


def kfold_cv(data: ImageSet, build_model: Callable[[], Model], cfg: TrainConfig, k: int = 5,
             topology: str = "fold", val_fraction: float = 0.1, test_fraction: float = 0.1,
             seed: Optional[int] = None) -> CVResult:
    """Stratified k-fold cross-validation.

    ``topology="fold"``: each held-out fold is the test set and a stratified
    ``val_fraction`` of the remaining folds drives early stopping.
    ``topology="global"``: a stratified ``test_fraction`` holdout is set
    aside once; folds are built on the rest, each held-out fold serves as
    validation and the shared holdout is the test set.
    """
    seed = cfg.seed if seed is None else seed
    if topology not in ("fold", "global"):
        raise ConfigError(f"unknown CV topology {topology!r}")
    results = []
    if topology == "fold":
        plan = make_folds(data, k, seed)
        for f in range(k):
            rest, held = plan.fold_indices(f)
            rest = np.asarray(rest)
            inner = stratified_split(data.labels[rest], val_fraction, seed=seed + 1000 + f)
            tr, va = rest[inner.train], rest[inner.test]
            model, curve = train(build_model(), data.subset(tr), data.subset(va), replace(cfg, seed=cfg.seed + f))
            results.append(FoldResult(f + 1, evaluate(model, data.subset(va))[1],
                                      evaluate(model, data.subset(held))[1], curve))
    else:
        outer = stratified_split(data, test_fraction, seed)
        pool = np.asarray(outer.train)
        test = data.subset(outer.test)
        plan = make_folds(data.labels[pool], k, seed, data.class_names)
        for f in range(k):
            tr, va = plan.fold_indices(f)
            model, curve = train(build_model(), data.subset(pool[tr]), data.subset(pool[va]),
                                 replace(cfg, seed=cfg.seed + f))
            results.append(FoldResult(f + 1, evaluate(model, data.subset(pool[va]))[1],
                                      evaluate(model, test)[1], curve))
    return CVResult(results, topology)


# -- hyperparameter search ----------------------------------------------------


@dataclass
class SearchSpace:
    batch_sizes: tuple = (16, 32, 64, 128)
    epochs: tuple = (10, 100)
    learning_rates: tuple = (0.01, 0.001, 0.0005, 0.0001)
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        lo, hi = self.epochs
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid epoch range {self.epochs}")

    def sample(self) -> list:
        rng = make_rng(self.seed, "search")
        out = []
        for _ in range(self.trials):
            out.append({
                "batch_size": int(rng.choice(self.batch_sizes)),
                "max_epochs": int(rng.integers(self.epochs[0], self.epochs[1] + 1)),
                "learning_rate": float(rng.choice(self.learning_rates)),
            })
        return out


@dataclass
class Trial:
    trial: int
    batch_size: int
    max_epochs: int
    learning_rate: float
    val_accuracy: float
    val_loss: float
    epochs_run: int


def hyperparameter_search(space: SearchSpace, data: ImageSet, build_model: Callable[[], Model],
                          base_cfg: TrainConfig, val_fraction: float = 0.1) -> tuple:
    """Random search; returns ``(ranked trials, best TrainConfig)``.

    All trials share one stratified train/validation split.  Ranking is by
    validation accuracy, then lower validation loss, then trial order.
    """
    split = stratified_split(data, val_fraction, base_cfg.seed)
    tr, va = data.subset(split.train), data.subset(split.test)
    trials = []
    for i, params in enumerate(space.sample(), start=1):
        cfg = replace(base_cfg, **params)
        model, curve = train(build_model(), tr, va, cfg)
        loss, acc = evaluate(model, va)
        trials.append(Trial(i, cfg.batch_size, cfg.max_epochs, cfg.learning_rate, acc, loss, len(curve.records)))
    ranked = sorted(trials, key=lambda t: (-t.val_accuracy, t.val_loss, t.trial))
    best = ranked[0]
    return ranked, replace(base_cfg, batch_size=best.batch_size, max_epochs=best.max_epochs,
                           learning_rate=best.learning_rate)


def write_trials_csv(trials: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(asdict(trials[0]).keys()) if trials else ["trial"]
        w.writerow(["rank"] + cols)
        for rank, t in enumerate(trials, start=1):
            w.writerow([rank] + list(asdict(t).values()))
