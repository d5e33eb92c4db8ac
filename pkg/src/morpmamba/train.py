"""Loss, Adam, the training loop and OA/AA/kappa evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, NumericalError, TrainingError, ValidationError
from .ingest import Sample, stack_samples
from .model import MorpMamba
from .numerics import Tape, Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.001
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


def loss(logits: Tensor, labels, w_classifier: Tensor, lam: float) -> Tensor:
    """Mean softmax cross-entropy over the batch plus lam * sum(W_classifier^2).

    ``labels`` are 1-based class ids.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1, logits.shape[0]))
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{labels.size} labels for a batch of {b}")
    if labels.min() < 1 or labels.max() > k:
        raise ValidationError(f"labels must lie in [1, {k}], got range [{labels.min()}, {labels.max()}]")
    logp = nx.log_softmax(logits)
    picked = nx.getitem(logp, (np.arange(b), labels - 1))
    ce = nx.neg(nx.mean(picked))
    if lam == 0:
        return ce
    return nx.add(ce, nx.mul(nx.tsum(nx.mul(w_classifier, w_classifier)), lam))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {key!r} has shape {g.shape}, parameter has {p.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = truth, cols = prediction
    oa: float
    aa: float
    kappa: float
    kappa_degenerate: bool = False
    missing_classes: list[int] = field(default_factory=list)  # 1-based, excluded from AA

    @property
    def samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "kappa_degenerate": self.kappa_degenerate,
            "aa_missing_classes": list(self.missing_classes),
            "samples": self.samples,
        }


def confusion_matrix(truth, pred, k: int) -> np.ndarray:
    """Counts with 1-based labels; rows are truth."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.sum()
    if n == 0:
        raise ValidationError("cannot compute metrics from an empty confusion matrix")
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    oa = float(diag.sum() / n)
    present = rows > 0
    aa = float(np.mean(diag[present] / rows[present]))
    pe = float((rows * cols).sum() / (float(n) * float(n)))
    degenerate = abs(1.0 - pe) < 1e-12
    if degenerate:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    missing = [int(i) + 1 for i in np.flatnonzero(~present)]
    return Metrics(cm, oa, aa, float(kappa), degenerate, missing)


def evaluate(model: MorpMamba, samples: Sequence[Sample], batch_size: int = 256) -> Metrics:
    if not samples:
        raise ValidationError("evaluate needs at least one sample")
    x, y = stack_samples(samples, model.dtype)
    pred = model.predict(x, batch_size)
    return metrics_from_confusion(confusion_matrix(y, pred, model.config.classes))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class FitResult:
    best: MorpMamba
    final: MorpMamba
    best_epoch: int
    log: list[EpochRecord]

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(log: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in log:
        writer.writerow([r.epoch] + [f"{v:.6f}" for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc)])
    return buf.getvalue()


def _dataset_loss(model: MorpMamba, x: np.ndarray, y: np.ndarray, batch_size: int) -> tuple[float, float]:
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = model(x[i : i + batch_size])
        ce = loss(logits, y[i : i + batch_size], model.params["classifier.weight"], 0.0)
        total += ce.item() * len(logits.data)
        correct += int((logits.data.argmax(axis=1) + 1 == y[i : i + batch_size]).sum())
    w = model.params["classifier.weight"].data.astype(np.float64)
    penalty = model.config.lam * float((w * w).sum())
    return total / len(x) + penalty, correct / len(x)


def fit(model: MorpMamba, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig) -> FitResult:
    """Train ``model`` in place; return best-validation and final snapshots plus the epoch log.

    Ties in validation accuracy keep the earlier epoch.
    """
    if not train_set or not val_set:
        raise ValidationError("fit needs nonempty training and validation sets")
    x_tr, y_tr = stack_samples(train_set, model.dtype)
    x_va, y_va = stack_samples(val_set, model.dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    params = model.params
    lam = model.config.lam
    best, best_acc, best_epoch = None, -1.0, 0
    log: list[EpochRecord] = []
    n = len(x_tr)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        run_loss, run_correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            try:
                for p in params.values():
                    p.zero_grad()
                with Tape() as tape:
                    logits = model(x_tr[idx])
                    batch_loss = loss(logits, y_tr[idx], params["classifier.weight"], lam)
                tape.backward(batch_loss)
                grads = {k: p.grad for k, p in params.items()}
                for k, g in grads.items():
                    if not np.isfinite(g).all():
                        raise NumericalError(f"non-finite gradient for {k}")
                adam_step(params, grads, state, cfg.learning_rate)
            except NumericalError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            run_loss += batch_loss.item() * len(idx)
            run_correct += int((logits.data.argmax(axis=1) + 1 == y_tr[idx]).sum())
        val_loss, val_acc = _dataset_loss(model, x_va, y_va, cfg.batch_size)
        rec = EpochRecord(epoch, run_loss / n, run_correct / n, val_loss, val_acc)
        log.append(rec)
        logger.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f", *vars(rec).values())
        if val_acc > best_acc:
            best, best_acc, best_epoch = model.copy(), val_acc, epoch
    return FitResult(best=best, final=model.copy(), best_epoch=best_epoch, log=log)
