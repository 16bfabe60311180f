"""Quantum-inspired complex-valued network (QICVN).

Pipeline per sample: every feature value is embedded into an amplitude and a
phase vector, the amplitude is normalized to a unit pure state whose norm
becomes the feature's relative weight, states inside a window are mixed
into a density matrix with softmax(weights) coefficients, the density
matrix is read out by K projective measurements, the per-window readouts
are max-pooled and a linear softmax head produces class probabilities.

Complex quantities are carried as (real, imaginary) pairs of real tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, Module, uniform_init

NORM_EPS = 1e-8
# keeps |phase| < pi even where tanh saturates to exactly 1.0
PHASE_SCALE = float(np.nextafter(np.pi, 0.0))


@dataclass
class ComplexState:
    re: Tensor
    im: Tensor
    weight: Tensor


@dataclass
class DensityMatrix:
    re: Tensor
    im: Tensor

    def deviations(self) -> dict[str, float]:
        """Hermitian / trace deviations (max over any leading batch axes)."""
        re, im = self.re.data, self.im.data
        herm = max(np.abs(re - np.swapaxes(re, -1, -2)).max(), np.abs(im + np.swapaxes(im, -1, -2)).max())
        tr_re = np.abs(np.trace(re, axis1=-2, axis2=-1) - 1.0).max()
        tr_im = np.abs(np.trace(im, axis1=-2, axis2=-1)).max()
        return {"hermitian": float(herm), "trace_re": float(tr_re), "trace_im": float(tr_im)}

    def as_complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


@dataclass(frozen=True)
class WindowSpec:
    """``all``: one window over every feature; ``sliding``: n-grams with
    stride 1; ``partition``: consecutive non-overlapping blocks of ``size``."""

    kind: str = "all"
    size: int = 0

    def windows(self, num_features: int) -> list[slice]:
        if self.kind == "all":
            return [slice(0, num_features)]
        if self.size < 1:
            raise ValueError(f"window size must be >= 1 for {self.kind!r}")
        n = min(self.size, num_features)
        if self.kind == "sliding":
            return [slice(s, s + n) for s in range(num_features - n + 1)]
        if self.kind == "partition":
            return [slice(s, min(s + n, num_features)) for s in range(0, num_features, n)]
        raise ValueError(f"unknown window kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "size": self.size}


class ComplexEmbeddingParams(Module):
    """Per-feature affine maps scalar -> R^d for amplitude and phase.

    Row i of each [I, d] matrix is feature i's map.
    """

    def __init__(self, num_features: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if dim < 2:
            raise ValueError("embedding size d must be >= 2")
        self.num_features, self.dim = num_features, dim
        self.amp_W = self.add_param("amp_W", uniform_init(rng, (num_features, dim)))
        self.amp_b = self.add_param("amp_b", uniform_init(rng, (num_features, dim)))
        self.phase_W = self.add_param("phase_W", uniform_init(rng, (num_features, dim)))
        self.phase_b = self.add_param("phase_b", uniform_init(rng, (num_features, dim)))


class MeasurementSet(Module):
    """K measurement vectors stored unconstrained; unit-normalized on use."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.count, self.dim = count, dim
        self.re = self.add_param("re", uniform_init(rng, (count, dim)))
        self.im = self.add_param("im", uniform_init(rng, (count, dim)))

    def unit_vectors(self) -> tuple[Tensor, Tensor]:
        inv = _rsqrt(ad.sum(ad.square(self.re) + ad.square(self.im), axis=1))
        inv = _expand_last(inv, self.dim)
        return self.re * inv, self.im * inv


def _rsqrt(x: Tensor) -> Tensor:
    # 1/sqrt(x) for x > 0
    return ad.exp(ad.scale(ad.log(x), -0.5))


def _expand_last(x: Tensor, n: int) -> Tensor:
    """[..., ] -> [..., n] by repeating along a new trailing axis."""
    return ad.reshape(x, x.shape + (1,)) @ Tensor(np.ones((1, n)))


def _phase(pre: Tensor) -> Tensor:
    # pi * (2 sigmoid(z) - 1) == pi * tanh(z / 2)
    return ad.scale(ad.tanh(ad.scale(pre, 0.5)), PHASE_SCALE)


# --------------------------------------------------------------------------
# single-step operations
# --------------------------------------------------------------------------


def embed_feature(params: ComplexEmbeddingParams, i: int, x_i: float) -> tuple[Tensor, Tensor]:
    """Amplitude ReLU(W_amp,i x + b_amp,i) and phase in (-pi, pi) for one feature."""
    if not 0 <= i < params.num_features:
        raise IndexError(f"feature index {i} outside schema of {params.num_features}")
    x_i = float(x_i)
    amp = ad.relu(ad.scale(params.amp_W[i], x_i) + params.amp_b[i])
    phase = _phase(ad.scale(params.phase_W[i], x_i) + params.phase_b[i])
    return amp, phase


def normalize_state(amp: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
    """Split amplitude(s) [..., d] into unit direction A and norm w.

    Returns ``(A, w, degenerate)``.  Where ``w <= NORM_EPS`` the direction
    falls back to the first basis vector and ``degenerate`` is True.
    """
    d = amp.shape[-1]
    sumsq = ad.sum(ad.square(amp), axis=-1)
    degenerate = sumsq.data <= NORM_EPS ** 2
    if not degenerate.any():
        w = ad.sqrt(sumsq)
        return amp * _expand_last(_rsqrt(sumsq), d), w, degenerate
    mask = degenerate.astype(np.float64)
    # sqrt(s + 1) - 1 is 0 at s = 0 with a finite derivative
    w = ad.sqrt(sumsq + Tensor(mask)) - Tensor(mask)
    basis = np.zeros(amp.shape)
    basis[..., 0] = mask
    safe = amp + Tensor(basis)
    A = safe * _expand_last(_rsqrt(ad.sum(ad.square(safe), axis=-1)), d)
    return A, w, degenerate


def to_complex(A: Tensor, phase: Tensor, weight: Tensor | None = None) -> ComplexState:
    if A.shape != phase.shape:
        raise ShapeError("to_complex", A.shape, phase.shape)
    if weight is None:
        weight = Tensor(np.ones(A.shape[:-1]))
    return ComplexState(A * ad.cos(phase), A * ad.sin(phase), weight)


def _mixture(re: Tensor, im: Tensor, w: Tensor) -> tuple[DensityMatrix, Tensor]:
    """Batched local mixture: re, im [B, n, d], w [B, n] -> rho [B, d, d]."""
    d = re.shape[-1]
    p = ad.softmax(w)
    P = _expand_last(p, d)
    pre_, pim = P * re, P * im
    rho_re = ad.transpose(pre_) @ re + ad.transpose(pim) @ im
    rho_im = ad.transpose(pim) @ re - ad.transpose(pre_) @ im
    return DensityMatrix(rho_re, rho_im), p


def mixture_density(states: list[ComplexState]) -> DensityMatrix:
    """rho = sum_i softmax(w)_i |f_i><f_i| over one window of pure states."""
    if not states:
        raise ValueError("mixture_density: empty window")
    d = states[0].re.shape[-1]
    re = ad.reshape(ad.concat([ad.reshape(s.re, (1, d)) for s in states], axis=0), (1, len(states), d))
    im = ad.reshape(ad.concat([ad.reshape(s.im, (1, d)) for s in states], axis=0), (1, len(states), d))
    w = ad.reshape(ad.concat([ad.reshape(s.weight, (1,)) for s in states], axis=0), (1, len(states)))
    rho, _ = _mixture(re, im, w)
    return DensityMatrix(ad.reshape(rho.re, (d, d)), ad.reshape(rho.im, (d, d)))


def measure(rho: DensityMatrix, m: MeasurementSet) -> Tensor:
    """Re <v_k| rho |v_k> for each unit-normalized measurement vector.

    rho may be [d, d] or batched [B, d, d]; returns [K] or [B, K].
    """
    d = m.dim
    if rho.re.shape[-2:] != (d, d) or rho.im.shape != rho.re.shape:
        raise ShapeError("measure", rho.re.shape, (m.count, d))
    a, b = m.unit_vectors()
    K = m.count
    col = lambda t: ad.reshape(t, (K, d, 1))  # noqa: E731
    row = lambda t: ad.reshape(t, (K, 1, d))  # noqa: E731
    proj_re = col(a) @ row(a) + col(b) @ row(b)
    proj_im = col(b) @ row(a) - col(a) @ row(b)
    lead = rho.re.shape[:-2]
    flat_re = ad.reshape(rho.re, (-1, d * d))
    flat_im = ad.reshape(rho.im, (-1, d * d))
    out = flat_re @ ad.transpose(ad.reshape(proj_re, (K, d * d))) \
        + flat_im @ ad.transpose(ad.reshape(proj_im, (K, d * d)))
    return ad.reshape(out, lead + (K,))


# --------------------------------------------------------------------------
# full network
# --------------------------------------------------------------------------


@dataclass
class QICVNDiagnostics:
    feature_weights: list[Tensor]  # per window: softmax weights [B, n]
    densities: list[DensityMatrix] = field(default_factory=list)
    measurements: Tensor | None = None  # [B, J, K]
    degenerate: int = 0


class QICVNClassifier(Module):
    kind = "qicvn"
    layout = "flat"

    def __init__(self, num_features: int, dim: int = 16, measurements: int = 10, classes: int = 2,
                 window: WindowSpec | None = None, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.window = window or WindowSpec()
        self.embedding = self.add_child("embedding", ComplexEmbeddingParams(num_features, dim, rng))
        self.measurement = self.add_child("measurement", MeasurementSet(measurements, dim, rng))
        self.head = self.add_child("head", Linear(measurements, classes, rng))
        self.num_features, self.dim = num_features, dim
        self.config = {"num_features": num_features, "dim": dim, "measurements": measurements,
                       "classes": classes, "window": self.window.to_json(), "seed": seed}

    def embed(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x [B, I] -> amplitude, phase [B, I, d]."""
        B, I = x.shape
        if I != self.num_features:
            raise ShapeError("qicvn", x.shape, (I, self.num_features), detail="feature count")
        d = self.dim
        xs = ad.reshape(ad.transpose(x), (I, B, 1))

        def affine(W, b):
            z = xs @ ad.reshape(W, (I, 1, d))  # [I, B, d]
            return ad.bias_add(ad.transpose(z, (1, 0, 2)), b)

        amp = ad.relu(affine(self.embedding.amp_W, self.embedding.amp_b))
        phase = _phase(affine(self.embedding.phase_W, self.embedding.phase_b))
        return amp, phase

    def forward_with_diagnostics(self, x, keep_densities: bool = False) -> tuple[Tensor, QICVNDiagnostics]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
        amp, phase = self.embed(x)
        A, w, degenerate = normalize_state(amp)
        state = to_complex(A, phase, w)
        B = x.shape[0]
        K = self.measurement.count
        diag = QICVNDiagnostics(feature_weights=[], degenerate=int(degenerate.sum()))
        reads = []
        for win in self.window.windows(self.num_features):
            rho, p = _mixture(state.re[:, win, :], state.im[:, win, :], state.weight[:, win])
            diag.feature_weights.append(p)
            if keep_densities:
                diag.densities.append(rho)
            reads.append(measure(rho, self.measurement))
        J = len(reads)
        stacked = ad.reshape(ad.concat(reads, axis=1), (B, J, K))
        diag.measurements = stacked
        pooled = ad.max_pool(stacked, axis=1)
        return self.head(pooled), diag

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        logits, _ = self.forward_with_diagnostics(x)
        return logits


def qicvn_forward(model: QICVNClassifier, x, window: WindowSpec | None = None) -> tuple[Tensor, QICVNDiagnostics]:
    """Class probabilities and diagnostics for one sample [I] or a batch [B, I]."""
    if window is not None and window != model.window:
        model = _with_window(model, window)
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 1
    logits, diag = model.forward_with_diagnostics(x, keep_densities=True)
    probs = ad.softmax(logits)
    if single:
        probs = ad.reshape(probs, (probs.shape[-1],))
    return probs, diag


def _with_window(model: QICVNClassifier, window: WindowSpec) -> QICVNClassifier:
    clone = QICVNClassifier.__new__(QICVNClassifier)
    clone.__dict__.update(model.__dict__)
    clone.window = window
    clone.config = dict(model.config, window=window.to_json())
    return clone
