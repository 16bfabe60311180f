"""Model construction by kind, input scaling, and JSON checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from . import autodiff as ad
from .data import NUM_FLAT_FEATURES, STATIC_FEATURES, STEP_FEATURES, Dataset
from .nn import FFNNClassifier, LSTMClassifier, Module
from .qicvn import QICVNClassifier, WindowSpec

CHECKPOINT_SCHEMA = 1
MODEL_KINDS = ("ffnn", "lstm", "bilstm", "bilstm_attn", "qicvn")
DEFAULT_LAYOUT = {"ffnn": "flat", "lstm": "sequence", "bilstm": "sequence", "bilstm_attn": "sequence",
                  "lstm_attn": "sequence", "qicvn": "flat"}
SEQUENCE_DIM = len(STEP_FEATURES) + len(STATIC_FEATURES)


def build_model(kind: str, seed: int = 0, layout: str | None = None, input_dim: int | None = None,
                **hp) -> Module:
    """Construct an untrained model.  ``input_dim`` defaults to the data schema."""
    if kind not in DEFAULT_LAYOUT:
        raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")
    layout = layout or DEFAULT_LAYOUT[kind]
    if kind == "ffnn":
        dim = input_dim or NUM_FLAT_FEATURES
        return FFNNClassifier(dim, hidden=tuple(hp.get("hidden", (10, 10))), dropout=hp.get("dropout", 0.1), seed=seed)
    if kind == "qicvn":
        dim = input_dim or NUM_FLAT_FEATURES
        window = hp.get("window")
        if isinstance(window, dict):
            window = WindowSpec(**window)
        return QICVNClassifier(dim, dim=hp.get("dim", 16), measurements=hp.get("measurements", 10),
                               window=window, seed=seed)
    if layout == "flat":
        x_dim = 1
    else:
        x_dim = input_dim or SEQUENCE_DIM
    return LSTMClassifier(x_dim, kind=kind, hidden=hp.get("hidden", 10), layers=hp.get("layers", 2),
                          attn_dim=hp.get("attn_dim", 10), dropout=hp.get("dropout", 0.1), layout=layout,
                          seed=seed)


@dataclass
class Scaler:
    """Per-channel standardization fitted on training inputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> Scaler:
        flat = X.reshape(-1, X.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, channels: int) -> Scaler:
        return cls(np.zeros(channels), np.ones(channels))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> Scaler:
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


@dataclass
class Checkpoint:
    model: Module
    task: str
    scaler: Scaler
    hyperparameters: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def layout(self) -> str:
        return self.model.layout

    def prepare(self, ds: Dataset) -> np.ndarray:
        return self.scaler.transform(ds.inputs(self.layout))

    def predict_proba(self, ds: Dataset, batch_size: int = 512) -> np.ndarray:
        X = self.prepare(ds)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                logits = self.model.forward(X[start:start + batch_size])
                out.append(ad.softmax(logits).data)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "task": self.task,
            "layout": self.layout,
            "dims": self.model.config,
            "seed": self.model.config.get("seed", 0),
            "hyperparameters": self.hyperparameters,
            "scaler": self.scaler.to_json(),
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    obj = {
        "schema_version": CHECKPOINT_SCHEMA,
        "metadata": ckpt.metadata(),
        "params": {name: p.to_json() for name, p in ckpt.model.parameters().items()},
    }
    try:
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def _model_from_metadata(meta: dict) -> Module:
    dims = dict(meta["dims"])
    kind = meta["kind"]
    seed = dims.pop("seed", 0)
    if kind == "ffnn":
        return build_model(kind, seed, input_dim=dims["in_dim"], hidden=dims["hidden"], dropout=dims["dropout"])
    if kind == "qicvn":
        return build_model(kind, seed, input_dim=dims["num_features"], dim=dims["dim"],
                           measurements=dims["measurements"], window=dims["window"])
    return build_model(kind, seed, layout=dims["layout"], input_dim=dims["x_dim"], hidden=dims["hidden"],
                       layers=dims["layers"], attn_dim=dims["attn_dim"], dropout=dims["dropout"])


def load_checkpoint(path) -> Checkpoint:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if obj.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema_version {obj.get('schema_version')!r}")
    meta = obj["metadata"]
    model = _model_from_metadata(meta)
    model.load_state({k: Tensor.from_json(v).data for k, v in obj["params"].items()})
    return Checkpoint(model, meta["task"], Scaler.from_json(meta["scaler"]), meta.get("hyperparameters", {}))


def gradcheck_model(kind: str, seed: int = 0, tol: float = 1e-4, batch: int = 3) -> ad.GradCheckReport:
    """Finite-difference check of ``kind`` on a tiny random instance.

    Sizes: I=6 input features (QICVN d=4, K=3), T=4 steps for the LSTM kinds.
    Parameters are redrawn from U(-1, 1) so nonlinearities leave their linear regime.
    """
    from .nn import cross_entropy

    rng = np.random.default_rng(seed)
    I, T = 6, 4
    if kind == "ffnn":
        model = FFNNClassifier(I, hidden=(4, 4), dropout=0.0, seed=seed)
        x = rng.normal(size=(batch, I))
    elif kind == "qicvn":
        model = QICVNClassifier(I, dim=4, measurements=3, seed=seed)
        x = rng.normal(size=(batch, I))
    elif kind in LSTMClassifier.KINDS:
        model = LSTMClassifier(3, kind=kind, hidden=3, layers=2, attn_dim=3, dropout=0.0, seed=seed)
        x = rng.normal(size=(batch, T, 3))
    else:
        raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")
    params = model.parameters()
    for p in params.values():
        p.data[...] = rng.uniform(-1.0, 1.0, size=p.shape)
    y = rng.integers(0, 2, size=batch)
    return ad.grad_check(lambda: cross_entropy(model.forward(x), y), params, tol=tol)
