"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op appends a node to the tape of its operands; ``Tape.backward`` walks
the nodes once in reverse creation order, so gradients are accumulated in a
fixed order and repeat runs are bitwise identical.

    >>> tape = Tape()
    >>> x = tape.param(np.array([3.0]), "x")
    >>> grads = tape.backward(sum_all(mul(x, x)))
    >>> float(grads[x][0])
    6.0
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from funfreeze.errors import ContractError, DimensionError

LAYER_NORM_EPS = 1e-5

Vjp = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass(slots=True)
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Vjp | None = None


class Tensor:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index", "name")

    def __init__(self, tape: Tape, index: int, name: str | None = None):
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.grads[self.index] if self.tape.grads else None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.tape.nodes[self.index].op})"


class Tape:
    """Append-only record of a computation; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: list[Tensor] = []
        self.grads: list[np.ndarray | None] = []

    def _push(self, op: str, parents: tuple[Tensor, ...], value: np.ndarray, vjp: Vjp | None) -> Tensor:
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
        idx = tuple([p.index for p in parents])
        nodes = self.nodes
        nodes.append(Node(op, idx, value, vjp))
        return Tensor(self, len(nodes) - 1)

    def param(self, value: np.ndarray, name: str | None = None) -> Tensor:
        """Register a leaf whose gradient is reported by ``backward``.

        The array is not copied; do not mutate it until the tape is discarded.
        """
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("param", (), value, None))
        t = Tensor(self, len(self.nodes) - 1, name)
        self.params.append(t)
        return t

    def constant(self, value: np.ndarray) -> Tensor:
        return self._push("const", (), np.array(value, dtype=np.float64), None)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.tape is not self:
            raise ContractError("loss is not on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if grads[pid] is None:
                    # vjps may return views of g, so the first contribution is copied
                    grads[pid] = np.array(pg, dtype=np.float64)
                else:
                    grads[pid] += pg
        self.grads = grads
        out = {}
        for p in self.params:
            g = grads[p.index]
            out[p] = g if g is not None else np.zeros_like(p.data)
        return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    return a.tape._push("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as one node; same values as matmul followed by add."""
    X, W, B = x.data, w.data, b.data
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: cannot multiply {X.shape} by {W.shape}")
    if B.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {B.shape} does not match output width {W.shape[1]}")
    return x.tape._push("affine", (x, w, b), X @ W + B, lambda g: (g @ W.T, X.T @ g, g.sum(axis=0)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return a.tape._push("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every batch row."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        return a.tape._push("add", (a, b), A + B, lambda g: (g, g))
    if A.ndim == 2 and B.ndim == 1 and A.shape[1] == B.shape[0]:
        return a.tape._push("add_bias", (a, b), A + B, lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: shapes {A.shape} and {B.shape} are incompatible")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return a.tape._push("mul", (a, b), A * B, lambda g: (g * B, g * A))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._push("mul_scalar", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape._push("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape._push("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    X = x.data
    n = X.shape[-1]
    if scale.shape != (n,) or shift.shape != (n,):
        raise DimensionError(f"layer_norm: scale {scale.shape} / shift {shift.shape} vs input {X.shape}")
    centered = X - X.sum(axis=-1, keepdims=True) / n
    inv_std = 1.0 / np.sqrt((centered * centered).sum(axis=-1, keepdims=True) / n + eps)
    xhat = centered * inv_std
    S = scale.data
    reduce_axes = tuple(range(X.ndim - 1))

    def vjp(g):
        gx = g * S
        dx = inv_std / n * (
            n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return x.tape._push("layer_norm", (x, scale, shift), xhat * S + shift.data, vjp)


def log_softmax(logits: Tensor) -> Tensor:
    Z = logits.data
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise DimensionError(f"log_softmax: expected b x C with C >= 2, got {Z.shape}")
    shifted = Z - Z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return logits.tape._push("log_softmax", (logits,), out, lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def nll(log_probs: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise log-probabilities."""
    LP = log_probs.data
    y = np.asarray(labels, dtype=np.int64)
    if LP.ndim != 2 or y.shape != (LP.shape[0],):
        raise DimensionError(f"nll: log_probs {LP.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= LP.shape[1]):
        raise IndexError(f"nll: labels must lie in [0, {LP.shape[1]})")
    b = LP.shape[0]
    rows = np.arange(b)

    def vjp(g):
        d = np.zeros_like(LP)
        d[rows, y] = -float(g) / b
        return (d,)

    return log_probs.tape._push("nll", (log_probs,), np.array(-LP[rows, y].sum() / b), vjp)


def finite_diff_grad(
    f: Callable[[], float], params: dict[str, np.ndarray], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each array in ``params``.

    ``f`` takes no arguments and reads the arrays, which are perturbed in place
    one coordinate at a time and restored exactly afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for name, arr in params.items():
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name}: finite differences need a contiguous array")
        g = np.zeros_like(arr, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out
