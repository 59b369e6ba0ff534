"""SGD with warm restarts, three-crop inference and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import augment_batch
from .config import AugmentConfig, TrainConfig
from .errors import ContractError, TrainingError
from .features import fixed_crops, random_crop
from .layers import _softmax, cross_entropy_soft
from .lcnn import LCNNModel
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class LabeledExample:
    features: np.ndarray  # (T, F), already normalized
    label: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# learning-rate schedule


def lr_at(t: float, period: float, lr0: float = 0.001, eta_min: float = 1e-6) -> float:
    """Cosine decay from ``lr0`` at t=0 to ``eta_min`` at t=period."""
    if not 0 <= t <= period:
        raise ContractError(f"lr_at: t={t} outside [0, {period}]")
    # sin form: exactly 1, 0 and -1 at the start, middle and end of a cycle
    c = math.sin(math.pi * (0.5 - t / period))
    if c == 0:
        return 0.5 * (lr0 + eta_min)
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + c)


@dataclass
class WarmRestarts:
    """Cycles of length t0, t0*t_mult, t0*t_mult**2, ... measured in epochs."""

    lr0: float = 0.001
    t0: int = 10
    t_mult: int = 2
    eta_min: float = 1e-6

    def locate(self, epoch: float) -> tuple[int, float, float]:
        """(cycle index, position within cycle, cycle length) for a fractional epoch."""
        start, length, cycle = 0.0, float(self.t0), 0
        while epoch >= start + length:
            start += length
            length *= self.t_mult
            cycle += 1
        return cycle, epoch - start, length

    def lr(self, epoch: float) -> float:
        _, t, period = self.locate(epoch)
        return lr_at(t, period, self.lr0, self.eta_min)

    def is_cycle_end(self, epoch: int) -> bool:
        """True when integer epoch ``epoch`` (0-based) is the last of its cycle."""
        return self.locate(epoch + 1)[0] != self.locate(epoch)[0]


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}
        self.skipped = 0

    def step(self, model: LCNNModel, grads: dict[str, np.ndarray], lr: float) -> bool:
        params = model.parameters()
        for name, g in grads.items():
            if name not in params:
                raise KeyError(name)
            if g.shape != params[name].shape:
                raise ContractError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped)
            return False
        for name, g in grads.items():
            p = params[name].data
            d = g + self.weight_decay * p if self.weight_decay else g
            v = self.velocity.get(name)
            v = d if v is None or not self.momentum else self.momentum * v + d
            self.velocity[name] = v
            model.set_tensor(name, Tensor((p - lr * v).astype(p.dtype), grad_tracked=True))
        return True


def sgd_step(model: LCNNModel, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             state: SGD | None = None) -> SGD:
    state = state or SGD(momentum, weight_decay)
    state.step(model, grads, lr)
    return state


# ---------------------------------------------------------------------------
# forward helpers


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def loss_and_grads(model: LCNNModel, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Training-mode loss, logits and per-parameter gradients for one batch."""
    params = model.parameters()
    with Tape() as tape:
        logits = model.forward(Tensor(x[:, None]), training=True)
        loss = cross_entropy_soft(logits, Tensor(y))
    by_id = backward(loss, tape)
    grads = {name: by_id[t.id].data for name, t in params.items() if t.id in by_id}
    return loss.item(), logits.data, grads


def batch_loss(model: LCNNModel, x: np.ndarray, y: np.ndarray, training: bool = False) -> float:
    logits = model.forward(Tensor(x[:, None]), training=training)
    return cross_entropy_soft(logits, Tensor(y)).item()


def predict(model: LCNNModel, spec: np.ndarray, logit_mean: bool = False) -> np.ndarray:
    """Class probabilities averaged over the start, middle and end crops."""
    frames = model.cfg.input_frames
    logits = [model.forward(Tensor(c[None, None]), training=False).data[0] for c in fixed_crops(spec, frames)]
    if logit_mean:
        return _softmax(np.mean(np.stack(logits).astype(np.float64), axis=0)[None])[0]
    probs = [_softmax(z[None].astype(np.float64))[0] for z in logits]
    return np.mean(np.stack(probs), axis=0)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray  # rows truth, cols prediction

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else float("nan")

    @property
    def per_class(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)


def confusion_from(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> Metrics:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return Metrics(cm)


def evaluate(model: LCNNModel, dataset: Sequence[LabeledExample], logit_mean: bool = False) -> Metrics:
    preds = [int(np.argmax(predict(model, ex.features, logit_mean))) for ex in dataset]
    return confusion_from([ex.label for ex in dataset], preds, model.cfg.num_classes)


def confusion_pairs(metrics: Metrics | np.ndarray, k: int = 5) -> list[tuple[int, int, int]]:
    """Top-k unordered class pairs by count(i->j) + count(j->i)."""
    cm = metrics.confusion if isinstance(metrics, Metrics) else np.asarray(metrics)
    c = cm.shape[0]
    if not 0 <= k <= c * (c - 1) // 2:
        raise ContractError(f"k={k} outside [0, {c * (c - 1) // 2}]")
    sym = cm + cm.T
    iu, ju = np.triu_indices(c, 1)
    counts = sym[iu, ju]
    order = sorted(range(len(counts)), key=lambda n: (-counts[n], iu[n], ju[n]))
    return [(int(iu[n]), int(ju[n]), int(counts[n])) for n in order[:k]]


def format_report(metrics: Metrics, labels: Sequence[str], k: int = 5) -> str:
    cm = metrics.confusion
    width = max(8, max(len(l) for l in labels) + 1)
    lines = [f"accuracy\t{metrics.accuracy:.4f}", f"clips\t{metrics.total}", "", "per-class accuracy"]
    for name, acc in zip(labels, metrics.per_class):
        lines.append(f"{name}\t{acc:.4f}")
    lines += ["", "confusion matrix (rows: truth, columns: prediction)"]
    lines.append(" " * width + "".join(f"{i:>6d}" for i in range(len(labels))))
    for i, name in enumerate(labels):
        lines.append(f"{i:>2d} {name:<{width - 3}}" + "".join(f"{v:>6d}" for v in cm[i]))
    lines += ["", f"top-{k} confused pairs", "Class\tCount"]
    pairs = confusion_pairs(metrics, k)
    for i, j, n in pairs:
        lines.append(f"{labels[i]} - {labels[j]}\t{n}")
    lines.append(f"Total\t{sum(n for _, _, n in pairs)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.8g}\t{self.train_loss:.6f}\t{self.train_acc:.4f}\t{self.val_acc:.4f}"


def train(
    model: LCNNModel,
    dataset: Sequence[LabeledExample],
    cfg: TrainConfig | None = None,
    augment: AugmentConfig | None = None,
    val_set: Sequence[LabeledExample] | None = None,
    on_epoch: Callable[[EpochLog, LCNNModel, bool], None] | None = None,
) -> tuple[LCNNModel, list[EpochLog]]:
    """Mini-batch training on random crops.

    ``on_epoch(entry, model, cycle_end)`` is called after every epoch; the
    CLI uses it to write the log and checkpoints.
    """
    cfg = cfg or TrainConfig()
    augment = augment or AugmentConfig()
    if not dataset:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    schedule = WarmRestarts(cfg.lr0, cfg.t0, cfg.t_mult, cfg.eta_min)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    n_cls = model.cfg.num_classes
    n = len(dataset)
    n_batches = math.ceil(n / cfg.batch_size)
    history: list[EpochLog] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        epoch_lr = schedule.lr(epoch)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = np.stack([random_crop(dataset[i].features, cfg.crop_frames, rng) for i in idx])
            y = one_hot([dataset[i].label for i in idx], n_cls)
            x, y = augment_batch(x, y, augment, rng)
            loss, logits, grads = loss_and_grads(model, x, y)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, batch {b + 1}")
            opt.step(model, grads, schedule.lr(epoch + b / n_batches))
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y.argmax(axis=1)))

        val_acc = float("nan")
        if val_set and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            val_acc = evaluate(model, val_set, cfg.logit_mean).accuracy
        entry = EpochLog(epoch + 1, epoch_lr, loss_sum / n, correct / n, val_acc)
        history.append(entry)
        log.info("epoch %s", entry.line())
        if on_epoch is not None:
            on_epoch(entry, model, schedule.is_cycle_end(epoch))
        if cfg.stop_at_train_acc is not None and entry.train_acc >= cfg.stop_at_train_acc:
            break
    return model, history
