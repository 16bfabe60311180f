"""Baseline neural models: feed-forward net, (Bi-)LSTM, additive attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INIT_SCALE = 0.1


class Module:
    """Container of named parameters and child modules.

    ``parameters()`` yields ``{"path.to.param": Tensor}`` in registration
    order; the paths are the keys used by checkpoints.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: Module) -> Module:
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError("load_state", p.shape, value.shape, detail=name)
            p.data = value.copy()


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param("weight", uniform_init(rng, (in_dim, out_dim)))
        self.bias = self.add_param("bias", uniform_init(rng, (out_dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, self.weight.shape)
        return ad.bias_add(x @ self.weight, self.bias)


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------


@dataclass
class DropoutConfig:
    p: float = 0.1
    mode: str = "eval"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.p}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be train|eval, got {self.mode!r}")


def dropout_apply(x: Tensor, cfg: DropoutConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode or when ``p == 0``."""
    if cfg.mode == "eval" or cfg.p == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    keep = rng.random(x.shape) >= cfg.p
    return x * Tensor(keep / (1.0 - cfg.p))


# --------------------------------------------------------------------------
# feed-forward network
# --------------------------------------------------------------------------


def ffnn_forward(x: Tensor, layers: Sequence[Linear], dropout: DropoutConfig,
                 rng: np.random.Generator | None = None) -> Tensor:
    """ReLU hidden layers with dropout after each, linear output layer."""
    if rng is None and dropout.mode == "train":
        rng = np.random.default_rng(dropout.seed)
    h = x
    for layer in layers[:-1]:
        h = dropout_apply(ad.relu(layer(h)), dropout, rng)
    return layers[-1](h)


class FFNNClassifier(Module):
    kind = "ffnn"
    layout = "flat"

    def __init__(self, in_dim: int, hidden: Sequence[int] = (10, 10), classes: int = 2,
                 dropout: float = 0.1, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, classes]
        self.layers = [self.add_child(f"layer{i}", Linear(a, b, rng)) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.dropout = dropout
        self.config = {"in_dim": in_dim, "hidden": list(hidden), "classes": classes, "dropout": dropout, "seed": seed}

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = DropoutConfig(self.dropout, "train" if train else "eval")
        return ffnn_forward(x, self.layers, cfg, rng)


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


class LSTMCellParams(Module):
    def __init__(self, x_dim: int, h_dim: int, rng: np.random.Generator):
        super().__init__()
        self.x_dim, self.h_dim = x_dim, h_dim
        self.W, self.U, self.b = {}, {}, {}
        for g in GATES:
            self.W[g] = self.add_param(f"W_{g}", uniform_init(rng, (x_dim, h_dim)))
            self.U[g] = self.add_param(f"U_{g}", uniform_init(rng, (h_dim, h_dim)))
            self.b[g] = self.add_param(f"b_{g}", uniform_init(rng, (h_dim,)))

    def fused(self) -> tuple[Tensor, Tensor, Tensor]:
        """Gate parameters stacked as [x, 4h], [h, 4h], [4h] in GATES order."""
        return (ad.concat([self.W[g] for g in GATES], axis=1),
                ad.concat([self.U[g] for g in GATES], axis=1),
                ad.concat([self.b[g] for g in GATES], axis=0))


def lstm_cell_step(params: LSTMCellParams, x_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.  Accepts unbatched ``[dim]`` or batched ``[B, dim]`` inputs."""
    unbatched = x_t.ndim == 1
    if unbatched:
        x_t, h, c = (ad.reshape(t, (1, -1)) for t in (x_t, h, c))
    if x_t.shape[-1] != params.x_dim or h.shape[-1] != params.h_dim or c.shape != h.shape:
        raise ShapeError("lstm_cell_step", x_t.shape, h.shape, c.shape)

    def pre(g):
        return ad.bias_add(x_t @ params.W[g] + h @ params.U[g], params.b[g])

    i = ad.sigmoid(pre("input"))
    f = ad.sigmoid(pre("forget"))
    o = ad.sigmoid(pre("output"))
    g = ad.tanh(pre("candidate"))
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if unbatched:
        return ad.reshape(h_new, (-1,)), ad.reshape(c_new, (-1,))
    return h_new, c_new


def _run_direction(params: LSTMCellParams, xs: Tensor, reverse: bool) -> Tensor:
    """Unroll one direction over xs [B, T, x]; returns outputs [B, T, h] in time order."""
    B, T, _ = xs.shape
    H = params.h_dim
    W, U, b = params.fused()
    xw = ad.bias_add(xs @ W, b)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xw[:, t, :] + h @ U
        gates = ad.sigmoid(z[:, : 3 * H])
        cand = ad.tanh(z[:, 3 * H:])
        i, f, o = gates[:, :H], gates[:, H: 2 * H], gates[:, 2 * H:]
        c = f * c + i * cand
        h = o * ad.tanh(c)
        outs[t] = h
    return ad.reshape(ad.concat(outs, axis=1), (B, T, H))


def lstm_sequence(params, xs: Tensor, direction: str = "forward", dropout: DropoutConfig | None = None,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Run an LSTM layer over ``xs`` ([T, x] or [B, T, x]) from zero state.

    ``params`` is one LSTMCellParams for forward/backward, or a
    ``(forward, backward)`` pair for ``direction="bi"``; the bi output
    concatenates both directions per step.
    """
    unbatched = xs.ndim == 2
    if unbatched:
        xs = ad.reshape(xs, (1,) + xs.shape)
    if xs.ndim != 3:
        raise ShapeError("lstm_sequence", xs.shape, detail="expected [T, x] or [B, T, x]")
    if xs.shape[1] == 0:
        raise ValueError("lstm_sequence: empty sequence (T = 0)")
    if direction == "forward":
        out = _run_direction(params, xs, reverse=False)
    elif direction == "backward":
        out = _run_direction(params, xs, reverse=True)
    elif direction == "bi":
        fwd, bwd = params
        out = ad.concat([_run_direction(fwd, xs, False), _run_direction(bwd, xs, True)], axis=2)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if dropout is not None:
        out = dropout_apply(out, dropout, rng)
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


class AttentionParams(Module):
    def __init__(self, h_dim: int, a_dim: int, rng: np.random.Generator):
        super().__init__()
        if a_dim <= 0:
            raise ValueError("attention size must be positive")
        self.W_a = self.add_param("W_a", uniform_init(rng, (h_dim, a_dim)))
        self.v_a = self.add_param("v_a", uniform_init(rng, (a_dim,)))


def attention_forward(params: AttentionParams, hs: Tensor) -> tuple[Tensor, Tensor]:
    """Additive attention: e_t = v . tanh(W^T h_t), weights = softmax(e).

    ``hs`` is [T, h] or [B, T, h]; returns (context [.., h], weights [.., T]).
    """
    unbatched = hs.ndim == 2
    if unbatched:
        hs = ad.reshape(hs, (1,) + hs.shape)
    B, T, H = hs.shape
    if T == 0:
        raise ValueError("attention_forward: empty sequence (T = 0)")
    v = ad.reshape(params.v_a, (-1, 1))
    scores = ad.reshape(ad.tanh(hs @ params.W_a) @ v, (B, T))
    weights = ad.softmax(scores)
    context = ad.reshape(ad.reshape(weights, (B, 1, T)) @ hs, (B, H))
    if unbatched:
        return ad.reshape(context, (H,)), ad.reshape(weights, (T,))
    return context, weights


class LSTMClassifier(Module):
    """Stacked (Bi-)LSTM with optional attention, then a linear 2-class head.

    kinds: ``lstm`` (unidirectional), ``bilstm``, ``bilstm_attn``.
    ``layout="sequence"`` reads [B, 12, step+static] inputs; ``layout="flat"``
    feeds the flattened feature vector one value per time step.
    """

    KINDS = {"lstm": (False, False), "bilstm": (True, False), "bilstm_attn": (True, True), "lstm_attn": (False, True)}

    def __init__(self, x_dim: int, kind: str = "bilstm_attn", hidden: int = 10, layers: int = 2,
                 attn_dim: int = 10, classes: int = 2, dropout: float = 0.1, layout: str = "sequence",
                 seed: int = 0):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown LSTM kind {kind!r}")
        self.kind = kind
        self.layout = layout
        self.bidirectional, self.attention = self.KINDS[kind]
        rng = np.random.default_rng(seed)
        self.cells = []
        in_dim = x_dim
        for li in range(layers):
            if self.bidirectional:
                pair = (self.add_child(f"lstm{li}_fwd", LSTMCellParams(in_dim, hidden, rng)),
                        self.add_child(f"lstm{li}_bwd", LSTMCellParams(in_dim, hidden, rng)))
                self.cells.append(pair)
                in_dim = 2 * hidden
            else:
                self.cells.append(self.add_child(f"lstm{li}", LSTMCellParams(in_dim, hidden, rng)))
                in_dim = hidden
        self.attn = self.add_child("attention", AttentionParams(in_dim, attn_dim, rng)) if self.attention else None
        self.head = self.add_child("head", Linear(in_dim, classes, rng))
        self.hidden = hidden
        self.dropout = dropout
        self.config = {"x_dim": x_dim, "hidden": hidden, "layers": layers, "attn_dim": attn_dim,
                       "classes": classes, "dropout": dropout, "layout": layout, "seed": seed}

    def encode(self, xs: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        direction = "bi" if self.bidirectional else "forward"
        drop = DropoutConfig(self.dropout, "train" if train else "eval")
        h = xs
        for li, cell in enumerate(self.cells):
            last = li == len(self.cells) - 1
            h = lstm_sequence(cell, h, direction, None if last else drop, rng)
        return h

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                return_attention: bool = False):
        xs = x if isinstance(x, Tensor) else Tensor(x)
        if self.layout == "flat" and xs.ndim == 2:
            xs = ad.reshape(xs, xs.shape + (1,))
        if xs.ndim != 3:
            raise ShapeError(self.kind, xs.shape, detail="expected batched input")
        hs = self.encode(xs, train, rng)
        B, T, H2 = hs.shape
        weights = None
        if self.attn is not None:
            summary, weights = attention_forward(self.attn, hs)
        elif self.bidirectional:
            H = self.hidden
            summary = ad.concat([hs[:, T - 1, :H], hs[:, 0, H:]], axis=1)
        else:
            summary = hs[:, T - 1, :]
        logits = self.head(summary)
        if return_attention:
            return logits, weights
        return logits


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shift = np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.shape).copy()
    z = logits - Tensor(shift)
    lse = ad.log(ad.sum(ad.exp(z), axis=1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ad.sum(z * Tensor(onehot), axis=1)
    return ad.mean(lse - picked)
