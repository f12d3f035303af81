"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op works on the trailing two axes ("rows" and "columns"); any leading
axes are batch axes and must agree exactly between operands.  Nothing is
broadcast implicitly.  The one exception is :func:`linear`, whose weight and
bias are shared across all leading axes by construction.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "tensor",
    "zeros",
    "matmul",
    "softmax_rows",
    "softmax_cols",
    "add",
    "mul",
    "elementwise",
    "linear",
    "mean_rows",
    "reshape",
    "transpose",
    "permute",
    "take_rows",
    "concat_cols",
    "scale",
    "dropout",
    "cross_entropy",
]

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array plus its gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, tape: Optional["Tape"] = None) -> None:
        """Backpropagate from this scalar through ``tape`` (default: the active one)."""
        tape = tape if tape is not None else Tape.current()
        if tape is None:
            raise RuntimeError("backward() needs a tape; run the forward pass inside `with Tape():`")
        tape.backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the same-shape ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Tapes are thread-confined: the active tape lives in thread-local storage.
    Nodes are appended in execution order, which is already a topological
    order, so backward is a plain reverse replay.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev: Optional[Tape] = None

    @staticmethod
    def current() -> Optional["Tape"]:
        return getattr(_local, "tape", None)

    def __enter__(self) -> "Tape":
        self._prev = Tape.current()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if root.size != 1:
                raise DimensionError(f"backward from non-scalar {root.shape} needs an explicit seed")
            seed = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out._accumulate(g)
            parts = node.backward(g)
            for inp, part in zip(node.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        # whatever is left belongs to leaves (parameters, inputs)
        for node in self.nodes:
            for inp in node.inputs:
                g = grads.pop(id(inp), None)
                if g is not None:
                    inp._accumulate(g)
        if id(root) in grads and root.requires_grad:
            root._accumulate(grads.pop(id(root)))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.current()
    if out.requires_grad and tape is not None:
        tape.record(out, inputs, backward)
    return out


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _check_batch(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"{what}: batch axes differ, {a.shape} vs {b.shape}")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_batch(a, b, "matmul")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ _swap(bd), _swap(ad) @ g

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``w`` (q, r) and ``b`` (r,) shared over every row and batch axis."""
    if w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} are incompatible")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def backward(g):
        flat_x = xd.reshape(-1, xd.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ wd.T, flat_x.T @ flat_g, flat_g.sum(axis=0)

    return _result(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "mul":
        return mul(a, b)
    if op == "add":
        return add(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# normalisation and reductions


def _softmax_last(x: np.ndarray) -> np.ndarray:
    if np.isnan(x).any():
        raise FloatingPointError("softmax: NaN in input")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis: every row becomes a distribution."""
    y = _softmax_last(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def softmax_cols(x: Tensor) -> Tensor:
    """Softmax along the second-to-last axis: every column becomes a distribution."""
    if x.ndim < 2:
        raise DimensionError(f"softmax_cols needs at least 2 axes, got {x.shape}")
    y = _swap(_softmax_last(_swap(x.data)))

    def backward(g):
        return (y * (g - (g * y).sum(axis=-2, keepdims=True)),)

    return _result(y, (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the row axis: (..., p, q) -> (..., q)."""
    if x.ndim < 2:
        raise DimensionError(f"mean_rows needs at least 2 axes, got {x.shape}")
    p = x.shape[-2]

    def backward(g):
        return (np.repeat(np.expand_dims(g / p, -2), p, axis=-2),)

    return _result(x.data.mean(axis=-2), (x,), backward)


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the trailing two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {x.shape}")
    return _result(np.ascontiguousarray(_swap(x.data)), (x,), lambda g: (_swap(g),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows by index, materialising repeats explicitly."""
    idx = np.asarray(index, dtype=np.intp)
    p = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= p):
        raise IndexError(f"take_rows: index out of range for {p} rows")

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(np.moveaxis(gx, -2, 0), idx, np.moveaxis(g, -2, 0))
        return (gx,)

    return _result(np.take(x.data, idx, axis=-2), (x,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_cols: leading shapes differ, {a.shape} vs {b.shape}")
    q = a.shape[-1]
    return _result(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :q], g[..., q:]),
    )


# ---------------------------------------------------------------------------
# regularisation and loss


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate), so eval is a no-op."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit random stream")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; logits (C,) with an int label or (B, C) with B labels."""
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects (C,) or (B, C) logits, got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, c = z.shape
    if lab.shape != (n,):
        raise DimensionError(f"cross_entropy: {lab.shape[0]} labels for {n} rows")
    if lab.min() < 0 or lab.max() >= c:
        raise IndexError(f"label out of range for {c} classes: {lab.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - shifted[rows, lab])

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, lab] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _result(np.asarray(loss), (logits,), backward)
