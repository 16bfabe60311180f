"""Adam, the mini-batch training loop and the weighted metric suite."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .models import Checkpoint, Scaler, build_model
from .nn import cross_entropy
from .qicvn import QICVNClassifier

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor] | Sequence[Tensor]) -> None:
    """One bias-corrected Adam update; zeroes the gradients afterwards."""
    named = params if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for name, p in named.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in named.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list[list[int]]  # confusion[true][pred]
    per_class: dict[int, dict[str, float]]
    average: str = "weighted"

    def row(self) -> str:
        """Table-2 style: Acc. Prec. Recall F1 in percent."""
        return " ".join(f"{100 * v:5.1f}" for v in (self.accuracy, self.precision, self.recall, self.f1))

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def _safe_div(a, b) -> Fraction:
    return Fraction(a, b) if b else Fraction(0)


def confusion_matrix(y_true, y_pred, classes: int = 2) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray, average: str = "weighted") -> Metrics:
    """Accuracy and averaged precision/recall/F1, 0/0 taken as 0.

    Arithmetic is exact (rationals) so weighted recall and accuracy agree
    bit-for-bit after conversion.
    """
    if average not in ("weighted", "macro"):
        raise ValueError(f"unknown average {average!r}")
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("metrics on an empty confusion matrix")
    k = cm.shape[0]
    per = {}
    P = R = F = Fraction(0)
    for c in range(k):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        prec = _safe_div(tp, predicted)
        rec = _safe_div(tp, support)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        per[c] = {"precision": float(prec), "recall": float(rec), "f1": float(f1), "support": support}
        w = Fraction(support, n) if average == "weighted" else Fraction(1, k)
        P += w * prec
        R += w * rec
        F += w * f1
    acc = Fraction(int(np.trace(cm)), n)
    if average == "weighted" and R != acc:
        raise AssertionError("weighted recall must equal accuracy")
    return Metrics(float(acc), float(P), float(R), float(F), cm.tolist(), per, average)


def compute_metrics(y_true, y_pred, classes: int = 2, average: str = "weighted") -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, classes), average)


def evaluate(ckpt: Checkpoint, ds: Dataset, average: str = "weighted") -> Metrics:
    if not len(ds):
        raise ValueError("evaluate: empty dataset")
    if ds.task != ckpt.task:
        raise ValueError(f"checkpoint trained for {ckpt.task!r}, dataset is {ds.task!r}")
    pred = ckpt.predict_proba(ds).argmax(axis=1)
    return compute_metrics(ds.labels(), pred, average=average)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    model: str = "bilstm_attn"
    task: str = "any"
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    dropout: float = 0.1
    patience: int = 10
    lr: float = 0.001
    layout: str | None = None
    normalize: bool = True
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _check_qicvn_probe(model: QICVNClassifier, X: np.ndarray) -> None:
    with ad.no_grad():
        _, diag = model.forward_with_diagnostics(X, keep_densities=True)
    for rho in diag.densities:
        dev = rho.deviations()
        if max(dev.values()) > 1e-9:
            raise TrainingError(f"density matrix invariants violated on probe batch: {dev}")
    m = diag.measurements.data
    if m.min() < -1e-9 or m.max() > 1 + 1e-9:
        raise TrainingError(f"measurement outside [0, 1]: [{m.min()}, {m.max()}]")


def train(cfg: TrainConfig, train_ds: Dataset, valid_ds: Dataset | None = None):
    """Mini-batch cross-entropy training keeping the best-validation-F1 weights.

    Returns ``(checkpoint, history)``; history rows carry epoch, mean train
    loss and validation acc/prec/rec/f1.
    """
    if not len(train_ds):
        raise ValueError("train: empty training set")
    if valid_ds is not None and valid_ds.task != train_ds.task:
        raise ValueError("train and validation sets have different tasks")
    model = build_model(cfg.model, seed=cfg.seed, layout=cfg.layout, dropout=cfg.dropout, **cfg.model_options)
    X = train_ds.inputs(model.layout)
    scaler = Scaler.fit(X) if cfg.normalize else Scaler.identity(X.shape[-1])
    X = scaler.transform(X)
    y = train_ds.labels()
    hp = {k: v for k, v in asdict(cfg).items()}
    ckpt = Checkpoint(model, train_ds.task, scaler, hp)
    history: list[dict] = []
    if cfg.epochs == 0:
        return ckpt, history

    params = model.parameters()
    ad.zero_grad(params.values())
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    probe = X[: min(32, len(X))]
    best_f1, best_state, stale = -1.0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(model.forward(X[idx], train=True, rng=rng), y[idx])
            value = loss.item()
            if not math.isfinite(value):
                norms = {k: float(np.linalg.norm(p.data)) for k, p in params.items()}
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}; parameter norms {norms}")
            ad.backward(loss)
            adam_step(state, params)
            total += value * len(idx)
            count += len(idx)
        if isinstance(model, QICVNClassifier):
            _check_qicvn_probe(model, probe)
        row = {"epoch": epoch, "loss": total / count}
        eval_ds = valid_ds if valid_ds is not None and len(valid_ds) else train_ds
        m = evaluate(ckpt, eval_ds)
        row.update(acc=m.accuracy, prec=m.precision, rec=m.recall, f1=m.f1)
        history.append(row)
        log.info("epoch %d loss %.4f f1 %.4f", epoch, row["loss"], m.f1)
        if m.f1 > best_f1:
            best_f1, stale = m.f1, 0
            best_state = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    return ckpt, history


HISTORY_FIELDS = ("epoch", "loss", "acc", "prec", "rec", "f1")


def write_history(history: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
