"""Dense-matrix arithmetic with a reverse-mode gradient tape.

A small define-by-run engine: every operation returns a fresh node holding a
2-D float64 array, and tracked nodes record a closure that pushes gradients
back to their parents.  The tape is rebuilt on every forward pass.  Sized for
the MLPs and graph layers used elsewhere in this package, nothing more: no
GPU, no sparsity, no higher-order derivatives.

Broadcasting is deliberately restricted: the only allowed shape mismatch is
adding a 1xN row vector (a bias) to an MxN matrix.  Everything else raises.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

Array = np.ndarray


def as_matrix(data) -> Array:
    """Coerce input to a C-contiguous 2-D float64 array (scalars become 1x1)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a scalar, vector or matrix, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


def _finite(value: Array, op: str) -> Array:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"non-finite values produced by '{op}'")
    return value


class Tensor:
    """One compute-graph node: a value, an optional gradient slot, and parents."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable[[Array], None] | None = None):
        self.value = as_matrix(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> Array:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, op={self.op!r}, grad={self.requires_grad})"

    # light sugar; the named functions below are the real API
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def _node(value: Array, op: str, parents: tuple, backward: Callable[[Array], None]) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(value, requires_grad=False, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# binary operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out_val = _finite(a.value @ b.value, "matmul")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)

    return _node(out_val, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = b.shape == (1, a.cols) and a.rows != 1
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out_val = _finite(a.value + b.value, "add")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0, keepdims=True) if bias else g)

    return _node(out_val, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    out_val = _finite(a.value - b.value, "sub")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _node(out_val, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out_val = _finite(a.value * b.value, "mul")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g * b.value)
        if b.requires_grad:
            b.accumulate(g * a.value)

    return _node(out_val, "mul", (a, b), backward)


# ---------------------------------------------------------------------------
# unary operations


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with scalar constants."""
    out_val = _finite(x.value * scale + shift, "affine")

    def backward(g: Array) -> None:
        x.accumulate(g * scale)

    return _node(out_val, "affine", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    out_val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                       np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def backward(g: Array) -> None:
        x.accumulate(g * out_val * (1.0 - out_val))

    return _node(out_val, "sigmoid", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_val = np.tanh(x.value)

    def backward(g: Array) -> None:
        x.accumulate(g * (1.0 - out_val * out_val))

    return _node(out_val, "tanh", (x,), backward)


def relu(x: Tensor) -> Tensor:
    out_val = np.maximum(x.value, 0.0)

    def backward(g: Array) -> None:
        x.accumulate(g * (x.value > 0.0))

    return _node(out_val, "relu", (x,), backward)


def softplus(x: Tensor) -> Tensor:
    # overflow-safe form: max(x, 0) + log(1 + exp(-|x|))
    v = x.value
    out_val = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def backward(g: Array) -> None:
        s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        x.accumulate(g * s)

    return _node(out_val, "softplus", (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as a DomainError
        out_val = _finite(np.exp(x.value), "exp")

    def backward(g: Array) -> None:
        x.accumulate(g * out_val)

    return _node(out_val, "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.value <= 0.0):
        raise DomainError("log of non-positive value")
    out_val = np.log(x.value)

    def backward(g: Array) -> None:
        x.accumulate(g / x.value)

    return _node(out_val, "log", (x,), backward)


def square(x: Tensor) -> Tensor:
    out_val = x.value * x.value

    def backward(g: Array) -> None:
        x.accumulate(g * 2.0 * x.value)

    return _node(out_val, "square", (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only strictly inside the range."""
    out_val = np.clip(x.value, lo, hi)

    def backward(g: Array) -> None:
        x.accumulate(g * ((x.value > lo) & (x.value < hi)))

    return _node(out_val, "clamp", (x,), backward)


def transpose(x: Tensor) -> Tensor:
    out_val = np.ascontiguousarray(x.value.T)

    def backward(g: Array) -> None:
        x.accumulate(g.T)

    return _node(out_val, "transpose", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_val = np.array([[x.value.sum()]])

    def backward(g: Array) -> None:
        x.accumulate(np.full_like(x.value, g[0, 0]))

    return _node(out_val, "sum", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    size = x.value.size
    out_val = np.array([[x.value.mean()]])

    def backward(g: Array) -> None:
        x.accumulate(np.full_like(x.value, g[0, 0] / size))

    return _node(out_val, "mean", (x,), backward)


def hconcat(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"hconcat: {a.shape} vs {b.shape}")
    out_val = np.hstack([a.value, b.value])
    split = a.cols

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g[:, :split])
        if b.requires_grad:
            b.accumulate(g[:, split:])

    return _node(out_val, "hconcat", (a, b), backward)


def vconcat(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ShapeError("vconcat: column counts differ")
    out_val = np.vstack([p.value for p in parts])
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def backward(g: Array) -> None:
        for p, r0, r1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[r0:r1])

    return _node(out_val, "vconcat", tuple(parts), backward)


def col_slice(x: Tensor, j0: int, j1: int) -> Tensor:
    if not (0 <= j0 < j1 <= x.cols):
        raise ShapeError(f"col_slice [{j0}:{j1}] of {x.shape}")
    out_val = np.ascontiguousarray(x.value[:, j0:j1])

    def backward(g: Array) -> None:
        full = np.zeros_like(x.value)
        full[:, j0:j1] = g
        x.accumulate(full)

    return _node(out_val, "col_slice", (x,), backward)


UNARY_OPS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "softplus": softplus,
    "exp": exp, "log": log, "square": square,
}

BINARY_OPS: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": add, "sub": sub, "mul": mul,
}


def elementwise(tag: str, *operands: Tensor) -> Tensor:
    """Dispatch an entry-wise operation by tag."""
    if tag in UNARY_OPS:
        (x,) = operands
        return UNARY_OPS[tag](x)
    if tag in BINARY_OPS:
        a, b = operands
        return BINARY_OPS[tag](a, b)
    raise ShapeError(f"unknown elementwise op {tag!r}")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate gradient slots of every tracked ancestor of a scalar loss."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.accumulate(np.ones((1, 1)))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters and the optimizer


class ParameterSet:
    """Named, ordered collection of trainable tensors with per-entry Adam state."""

    def __init__(self, name: str = ""):
        self.name = name
        self._entries: dict[str, Tensor] = {}
        self._moments: dict[str, tuple[Array, Array, int]] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = parameter(data)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._entries.items()

    def n_params(self) -> int:
        return sum(t.value.size for t in self._entries.values())

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, Array]:
        return {k: t.value.copy() for k, t in self._entries.items()}

    def pack(self) -> bytes:
        """Flat little-endian float64 blob in declaration order."""
        return b"".join(np.ascontiguousarray(t.value, dtype="<f8").tobytes()
                        for t in self._entries.values())

    def unpack(self, blob: bytes, offset: int = 0) -> int:
        """Load values from a blob produced by pack(); returns the new offset."""
        for t in self._entries.values():
            n = t.value.size * 8
            chunk = blob[offset:offset + n]
            if len(chunk) != n:
                raise ShapeError(f"parameter blob truncated in set {self.name!r}")
            t.value = np.frombuffer(chunk, dtype="<f8").reshape(t.value.shape).copy()
            offset += n
        return offset


def adam_step(params: ParameterSet, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; gradient slots are zeroed afterwards."""
    b1, b2 = betas
    for name, t in params.items():
        g = t.grad_or_zeros()
        m, v, step = params._moments.get(name, (np.zeros_like(t.value),
                                                np.zeros_like(t.value), 0))
        step += 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        t.value = _finite(t.value - lr * m_hat / (np.sqrt(v_hat) + eps), "adam_step")
        params._moments[name] = (m, v, step)
        t.zero_grad()


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Deterministic random stream; equal seeds give bit-identical sequences."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Array:
        return self._gen.normal(mean, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int, lo: float = 0.0, hi: float = 1.0) -> Array:
        return self._gen.uniform(lo, hi, size=(rows, cols))

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def derive(self, stream_id: int) -> "Rng":
        """Independent stream for a sub-task (per-sample generation etc.)."""
        return Rng(self.seed ^ int(stream_id))


def rng_create(seed: int) -> Rng:
    return Rng(seed)


def glorot_uniform(rng: Rng, rows: int, cols: int) -> Array:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(rows, cols, -limit, limit)
