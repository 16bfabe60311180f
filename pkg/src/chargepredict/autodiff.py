"""Reverse-mode automatic differentiation over dense float64 tensors.

Every trainable model in the package is assembled from the closed set of
primitives registered in ``PRIMITIVES``.  Shapes are strict: the only
broadcasting allowed is ``broadcast_add`` (trailing-shape bias add) and a
shared right-hand weight in ``matmul``.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "UnknownPrimitiveError",
    "NonDeterministicError",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "zero_grad",
    "no_grad",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Inputs do not conform to a primitive's shape rule."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownPrimitiveError(KeyError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the differentiation graph.

    ``data`` is a float64 ndarray; its row-major flattening is the canonical
    flat representation used for serialization.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, op={self.op})"

    # serialization
    def to_json(self) -> dict:
        return {"shape": list(self.shape), "data": self.data.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, obj: dict, requires_grad: bool = False) -> Tensor:
        shape = [int(s) for s in obj["shape"]]
        flat = np.asarray(obj["data"], dtype=np.float64)
        if int(np.prod(shape)) != flat.size:
            raise ValueError(f"tensor json: shape {shape} does not match {flat.size} values")
        return cls(flat.reshape(shape), requires_grad=requires_grad)

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", [self, _wrap(other)])

    def __sub__(self, other):
        return apply_primitive("subtract", [self, _wrap(other)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_multiply", [self], scalar=float(other))
        return apply_primitive("multiply", [self, _wrap(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("negate", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _wrap(other)])

    def __getitem__(self, key):
        return apply_primitive("slice", [self], key=key)

    @property
    def T(self):
        return apply_primitive("transpose", [self])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitive table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int | None  # None = variadic
    forward: Callable
    # backward(grad_out, out_data, input_datas, **attrs) -> list of input grads (None allowed)
    backward: Callable
    check: Callable | None = None
    doc: str = field(default="", compare=False)


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, forward, backward, check=None, doc=""):
    PRIMITIVES[name] = Primitive(name, arity, forward, backward, check, doc)


def _same_shape(name):
    def check(a, b, **_):
        if a.shape != b.shape:
            raise ShapeError(name, a.shape, b.shape)

    return check


_register(
    "add", 2,
    lambda a, b: a + b,
    lambda g, out, ins: [g, g],
    _same_shape("add"),
    "elementwise a + b, equal shapes",
)
_register(
    "subtract", 2,
    lambda a, b: a - b,
    lambda g, out, ins: [g, -g],
    _same_shape("subtract"),
    "elementwise a - b, equal shapes",
)
_register(
    "multiply", 2,
    lambda a, b: a * b,
    lambda g, out, ins: [g * ins[1], g * ins[0]],
    _same_shape("multiply"),
    "elementwise a * b, equal shapes",
)


def _matmul_check(a, b, **_):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch extents differ")


def _matmul_backward(g, out, ins):
    a, b = ins
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold batch axes
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return [g @ b.T, gb]
    return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]


_register(
    "matmul", 2,
    lambda a, b: np.asarray(a @ b, dtype=np.float64),
    _matmul_backward,
    _matmul_check,
    "a[..., n, k] @ b[k, m] (shared weight) or equal-batch a[..., n, k] @ b[..., k, m]",
)
_register(
    "scalar_multiply", 1,
    lambda a, scalar: a * scalar,
    lambda g, out, ins, scalar: [g * scalar],
    None,
    "a * c for a python float c",
)
_register("negate", 1, lambda a: -a, lambda g, out, ins: [-g])
_register("relu", 1, lambda a: np.maximum(a, 0.0), lambda g, out, ins: [g * (ins[0] > 0)])


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


_register("sigmoid", 1, _sigmoid, lambda g, out, ins: [g * out * (1.0 - out)])
_register("tanh", 1, np.tanh, lambda g, out, ins: [g * (1.0 - out * out)])
_register("exp", 1, np.exp, lambda g, out, ins: [g * out])
_register("log", 1, np.log, lambda g, out, ins: [g / ins[0]])
_register("square", 1, np.square, lambda g, out, ins: [2.0 * g * ins[0]])
_register("sqrt", 1, np.sqrt, lambda g, out, ins: [0.5 * g / out])
_register("cos", 1, np.cos, lambda g, out, ins: [-g * np.sin(ins[0])])
_register("sin", 1, np.sin, lambda g, out, ins: [g * np.cos(ins[0])])


def _softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_check(a, **_):
    if a.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape, detail="needs a nonempty last axis")


_register(
    "softmax", 1, _softmax,
    lambda g, out, ins: [out * (g - (g * out).sum(axis=-1, keepdims=True))],
    _softmax_check,
    "softmax over the last axis",
)


def _reduce_backward(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, ()), shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _axis_check(name):
    def check(a, axis=None, **_):
        if axis is not None and not -a.ndim <= axis < a.ndim:
            raise ShapeError(name, a.shape, detail=f"axis {axis} out of range")

    return check


_register(
    "sum", 1,
    lambda a, axis=None, keepdims=False: np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=np.float64),
    lambda g, out, ins, axis=None, keepdims=False: [_reduce_backward(g, ins[0].shape, axis, keepdims)],
    _axis_check("sum"),
)


def _mean_backward(g, out, ins, axis=None, keepdims=False):
    a = ins[0]
    n = a.size if axis is None else a.shape[axis]
    return [_reduce_backward(g, a.shape, axis, keepdims) / n]


_register(
    "mean", 1,
    lambda a, axis=None, keepdims=False: np.asarray(a.mean(axis=axis, keepdims=keepdims), dtype=np.float64),
    _mean_backward,
    _axis_check("mean"),
)


def _concat_check(*arrs, axis=0):
    if not arrs:
        raise ShapeError("concat", detail="no inputs")
    ref = arrs[0]
    ax = axis % ref.ndim
    for a in arrs[1:]:
        if a.ndim != ref.ndim or a.shape[:ax] + a.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError("concat", ref.shape, a.shape, detail=f"axis {axis}")


def _concat_backward(g, out, ins, axis=0):
    bounds = np.cumsum([a.shape[axis] for a in ins])[:-1]
    return list(np.split(g, bounds, axis=axis))


_register(
    "concat", None,
    lambda *arrs, axis=0: np.concatenate(arrs, axis=axis),
    _concat_backward,
    _concat_check,
)


@dataclass(frozen=True)
class SliceGrad:
    """Gradient that is zero outside ``key``; scattered lazily by :func:`backward`."""

    key: object
    values: np.ndarray
    shape: tuple

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.key] = self.values
        return full


def _slice_backward(g, out, ins, key):
    return [SliceGrad(key, g, ins[0].shape)]


def _slice_check(a, key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise ShapeError("slice", a.shape, detail="only basic int/slice indexing")
    try:
        a[key]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None


_register(
    "slice", 1,
    lambda a, key: np.array(a[key], dtype=np.float64),
    _slice_backward,
    _slice_check,
    "basic indexing (ints, slices, Ellipsis); backward scatters into zeros",
)


def _transpose_axes(ndim, axes):
    if axes is not None:
        return tuple(axes)
    if ndim < 2:
        return tuple(range(ndim))
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _transpose_check(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")


_register(
    "transpose", 1,
    lambda a, axes=None: np.ascontiguousarray(np.transpose(a, _transpose_axes(a.ndim, axes))),
    lambda g, out, ins, axes=None: [np.transpose(g, np.argsort(_transpose_axes(ins[0].ndim, axes)))],
    _transpose_check,
    "permute axes; default swaps the last two",
)


def _max_pool_backward(g, out, ins, axis):
    a = ins[0]
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    full = np.zeros_like(a)
    np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
    return [full]


_register(
    "max_pool", 1,
    lambda a, axis: np.asarray(a.max(axis=axis), dtype=np.float64),
    _max_pool_backward,
    _axis_check("max_pool"),
    "max over one axis (axis removed); ties route gradient to the first maximum",
)


def _bias_check(x, b):
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError("broadcast_add", x.shape, b.shape, detail="bias must match trailing axes")


_register(
    "broadcast_add", 2,
    lambda x, b: x + b,
    lambda g, out, ins: [g, g.reshape((-1,) + ins[1].shape).sum(axis=0) if ins[1].ndim else g.sum()],
    _bias_check,
    "x[..., *s] + b[*s]",
)


def _reshape_check(a, shape):
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, tuple(shape))


_register(
    "reshape", 1,
    lambda a, shape: a.reshape(shape),
    lambda g, out, ins, shape: [g.reshape(ins[0].shape)],
    _reshape_check,
    "row-major reshape",
)


def apply_primitive(tag: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``tag`` on ``inputs`` and record it in the graph."""
    try:
        prim = PRIMITIVES[tag]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {tag!r}") from None
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(tag, *[t.shape for t in inputs], detail=f"expects {prim.arity} inputs")
    arrays = [t.data for t in inputs]
    if prim.check is not None:
        prim.check(*arrays, **attrs)
    out = Tensor.__new__(Tensor)
    out.data = prim.forward(*arrays, **attrs)
    out.grad = None
    out._id = next(_ids)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = tag
        out.parents = tuple(inputs)
        out._backward = (prim.backward, attrs)
    else:
        out.requires_grad = False
        out.op = None
        out.parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def _topo_dfs(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], {root._id}, [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order[::-1]


def backward(loss: Tensor, order: str = "creation") -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls until :func:`zero_grad`.  Contributions
    to a node are summed in creation order of their consumers, so any valid
    topological schedule (``order="creation"`` or ``"dfs"``) gives
    bit-identical results.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss.requires_grad:
        return
    nodes = _topo_dfs(loss)
    if order == "creation":
        nodes.sort(key=lambda t: -t._id)
    elif order != "dfs":
        raise ValueError(f"unknown order {order!r}")

    pending: dict[int, list[tuple[int, np.ndarray]]] = {loss._id: [(-1, np.ones_like(loss.data))]}
    for node in nodes:
        contribs = pending.pop(node._id, None)
        if contribs is None:
            continue
        contribs.sort(key=lambda c: c[0])
        g, owned = None, False
        for _, c in contribs:
            if isinstance(c, SliceGrad):
                if g is None:
                    g, owned = np.zeros(c.shape), True
                elif not owned:
                    g, owned = g.copy(), True
                g[c.key] += c.values
            elif g is None:
                g = c  # may alias an upstream buffer; never written in place
            else:
                g, owned = g + c, True
        if node.grad is not None:
            node.grad = node.grad + g
        else:
            # leaves keep a private copy since callers may mutate .grad
            node.grad = g.copy() if node._backward is None and not owned else g
        if node._backward is None:
            continue
        fn, attrs = node._backward
        in_grads = fn(g, node.data, [p.data for p in node.parents], **attrs)
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if not isinstance(pg, SliceGrad):
                pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            pending.setdefault(p._id, []).append((node._id, pg))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    flagged: dict[str, list[int]]
    tol: float
    max_abs_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients with central differences for every entry.

    ``params`` is a sequence of tensors or a mapping name -> tensor.  ``f``
    must rebuild the scalar loss from the current parameter values.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}

    with no_grad():
        v1, v2 = float(f().item()), float(f().item())
    if v1 != v2 and not (np.isnan(v1) and np.isnan(v2)):
        raise NonDeterministicError(f"f evaluated to {v1!r} then {v2!r}")

    zero_grad(named.values())
    backward(f())
    analytic = {k: p.grad.copy() for k, p in named.items()}

    errs, abs_errs, flagged = {}, {}, {}
    with no_grad():
        for name, p in named.items():
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = f().item()
                flat[j] = orig - h
                fm = f().item()
                flat[j] = orig
                num[j] = (fp - fm) / (2.0 * h)
            rel = _rel_err(analytic[name].reshape(-1), num)
            errs[name] = float(rel.max()) if rel.size else 0.0
            abs_errs[name] = float(np.abs(analytic[name].reshape(-1) - num).max()) if rel.size else 0.0
            bad = np.nonzero(rel > tol)[0]
            if bad.size:
                flagged[name] = bad.tolist()
    return GradCheckReport(errs, flagged, tol, abs_errs)


def dumps(t: Tensor) -> str:
    return json.dumps(t.to_json())


# functional spellings of the primitives
def add(a, b):
    return apply_primitive("add", [a, b])


def subtract(a, b):
    return apply_primitive("subtract", [a, b])


def multiply(a, b):
    return apply_primitive("multiply", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def scale(a, c: float):
    return apply_primitive("scalar_multiply", [a], scalar=float(c))


def negate(a):
    return apply_primitive("negate", [a])


def relu(a):
    return apply_primitive("relu", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def tanh(a):
    return apply_primitive("tanh", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def square(a):
    return apply_primitive("square", [a])


def sqrt(a):
    return apply_primitive("sqrt", [a])


def cos(a):
    return apply_primitive("cos", [a])


def sin(a):
    return apply_primitive("sin", [a])


def softmax(a):
    return apply_primitive("softmax", [a])


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def concat(tensors, axis=0):
    return apply_primitive("concat", list(tensors), axis=axis)


def transpose(a, axes=None):
    return apply_primitive("transpose", [a], axes=None if axes is None else tuple(axes))


def max_pool(a, axis):
    return apply_primitive("max_pool", [a], axis=axis)


def bias_add(x, b):
    return apply_primitive("broadcast_add", [x, b])


def reshape(a, shape):
    return apply_primitive("reshape", [a], shape=tuple(shape))
