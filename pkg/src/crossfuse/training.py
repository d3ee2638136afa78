"""Loss, Adam, the training loop and accuracy metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .initializers import glorot_init  # noqa: F401  (re-exported)
from .kvtext import FieldError
from .model import FusionModel
from .tensor import Tape, Tensor, custom_op

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-6
    epochs: int = 500
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise FieldError("learning_rate", "must be non-negative")
        if self.epochs < 0:
            raise FieldError("epochs", "must be non-negative")
        if self.batch_size < 1:
            raise FieldError("batch_size", "must be positive")
        if not 0 < self.adam_beta1 < 1:
            raise FieldError("adam_beta1", "must lie in (0, 1)")
        if not 0 < self.adam_beta2 < 1:
            raise FieldError("adam_beta2", "must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise FieldError("adam_eps", "must be positive")
        if self.eval_every < 1:
            raise FieldError("eval_every", "must be positive")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label] over the batch (a single sample is a batch of one).

    Probabilities are floored at 1e-12 before the log; the floored entries
    receive zero gradient.
    """
    p = probs.data
    single = p.ndim == 1
    p2 = p[None, :] if single else p
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = p2.shape[-1]
    if y.shape != (p2.shape[0],):
        raise ValueError(f"{y.size} labels for a batch of {p2.shape[0]}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): {y[(y < 0) | (y >= n_classes)][0]}")
    rows = np.arange(len(y))
    picked = p2[rows, y]
    clamped = np.maximum(picked, PROB_FLOOR)
    n = len(y)
    loss = -np.log(clamped).sum() / n

    def back(g):
        gp = np.zeros_like(p2)
        gp[rows, y] = np.where(picked > PROB_FLOOR, -1.0 / clamped, 0.0) / n
        gp *= g
        return (gp[0] if single else gp,)

    return custom_op(np.array(loss), (probs,), back)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, t: int,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update at step ``t`` (1-based), in place."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    state.t = t


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray
    overall_accuracy: float
    per_class_accuracy: list[float]

    @classmethod
    def from_predictions(cls, labels, preds, n_classes: int) -> Metrics:
        labels = np.asarray(labels, dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("cannot compute metrics on an empty split")
        confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(confusion, (labels, preds), 1)
        total = confusion.sum()
        oa = float(np.trace(confusion) / total)
        rows = confusion.sum(axis=1)
        per_class = [float(confusion[c, c] / rows[c]) if rows[c] else math.nan for c in range(n_classes)]
        assert total == labels.size and oa == np.trace(confusion) / confusion.sum()
        return cls(confusion, oa, per_class)

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def table(self, title: str | None = None) -> str:
        """Per-class and overall accuracy in percent, two decimals."""
        lines = [title] if title else []
        lines.append(f"{'Class':>6}  {'Acc (%)':>8}")
        for c, acc in enumerate(self.per_class_accuracy, 1):
            cell = "n/a" if math.isnan(acc) else f"{100 * acc:.2f}"
            lines.append(f"{c:>6}  {cell:>8}")
        lines.append(f"{'OA':>6}  {100 * self.overall_accuracy:>8.2f}")
        return "\n".join(lines) + "\n"


def evaluate(model: FusionModel, split, batch_size: int = 256) -> Metrics:
    if len(split.labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = model.predict(split.hsi, split.lidar, batch_size)
    return Metrics.from_predictions(split.labels, preds, model.config.n_classes)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_oa: float | None
    test_oa: float | None

    def csv(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return f"{self.epoch},{fmt(self.mean_loss)},{fmt(self.train_oa)},{fmt(self.test_oa)}"


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for r in self.records:
                fh.write(r.csv() + "\n")

    @property
    def losses(self) -> list[float]:
        return [r.mean_loss for r in self.records]


def train(model: FusionModel, dataset, cfg: TrainConfig,
          callbacks: Sequence[Callable[[EpochRecord, FusionModel], None]] = (),
          test_set=None) -> History:
    """Mini-batch Adam on the mean cross-entropy of ``dataset``.

    ``dataset`` needs ``hsi``, ``lidar`` and ``labels`` arrays. Train/test
    accuracy is measured every ``cfg.eval_every`` epochs and on the last one.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("training set is empty")
    params = model.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    history = History()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            with Tape() as tape:
                probs = model.forward(dataset.hsi[idx], dataset.lidar[idx], training=True, rng=rng)
                loss = cross_entropy(probs, dataset.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            tape.backward(loss)
            step += 1
            adam_step(params, [p.grad for p in params], state, step, cfg)
            total += value * len(idx)
        measure = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        record = EpochRecord(
            epoch,
            total / n,
            evaluate(model, dataset).overall_accuracy if measure else None,
            evaluate(model, test_set).overall_accuracy if measure and test_set is not None else None,
        )
        history.records.append(record)
        log.debug("epoch %d loss %.6f train_oa %s test_oa %s", epoch, record.mean_loss, record.train_oa,
                  record.test_oa)
        for cb in callbacks:
            cb(record, model)
    model.zero_grad()
    return history
