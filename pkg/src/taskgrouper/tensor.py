"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor` wrapping a numpy array. Operations build an
implicit compute graph through parent links and per-node backward closures;
``loss.backward()`` walks the graph once in reverse topological order and
accumulates gradients into every reachable leaf that has ``requires_grad``.

The kernel set is deliberately small: elementwise add/multiply/scale, matmul,
relu, exp, log, the three global reductions (sum, mean, max), row softmax and
row log-softmax, and two index gathers (table rows, one column per row).
There is no broadcasting beyond adding a row vector to a matrix (bias), no
randomness, and no dtype other than float64.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for a kernel."""

    def __init__(self, kernel: str, *shapes):
        self.kernel = kernel
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{kernel}: incompatible shapes {pretty}")


class DomainError(ValueError):
    """Input outside a kernel's mathematical domain (e.g. log of x <= 0)."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 tensor participating in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def grad_array(self) -> np.ndarray:
        """Gradient, or zeros when this leaf never reached the loss."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph machinery -----------------------------------------------------

    def _make(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    @staticmethod
    def _accumulate(t: "Tensor", g: np.ndarray):
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf.

        ``self`` must be scalar (0-d). Each graph node is visited exactly once.
        """
        if self.data.ndim != 0:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        # iterative postorder: reversed(topo) is a valid backward order
        topo: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, any]] = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            while nxt is not None and id(nxt) in seen:
                nxt = next(it, None)
            if nxt is None:
                topo.append(node)
                stack.pop()
            else:
                seen.add(id(nxt))
                stack.append((nxt, iter(nxt._parents)))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- elementwise and linear kernels ---------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        a, b = self, other
        if a.shape == b.shape:
            def back(g):
                Tensor._accumulate(a, g)
                Tensor._accumulate(b, g)
            return self._make(a.data + b.data, (a, b), back)
        # bias case: matrix + row vector
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            def back(g):
                Tensor._accumulate(a, g)
                Tensor._accumulate(b, g.sum(axis=0))
            return self._make(a.data + b.data, (a, b), back)
        raise ShapeMismatchError("add", a.shape, b.shape)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        if not isinstance(other, Tensor):
            return NotImplemented
        a, b = self, other
        if a.shape != b.shape:
            raise ShapeMismatchError("multiply", a.shape, b.shape)

        def back(g):
            Tensor._accumulate(a, g * b.data)
            Tensor._accumulate(b, g * a.data)
        return self._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        return self + (-other)

    def scale(self, c: float) -> "Tensor":
        c = float(c)
        a = self

        def back(g):
            Tensor._accumulate(a, g * c)
        return self._make(a.data * c, (a,), back)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError("matmul", a.shape, b.shape)

        def back(g):
            Tensor._accumulate(a, g @ b.data.T)
            Tensor._accumulate(b, a.data.T @ g)
        return self._make(a.data @ b.data, (a, b), back)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0  # subgradient 0 at the kink

        def back(g):
            Tensor._accumulate(a, g * mask)
        return self._make(np.where(mask, a.data, 0.0), (a,), back)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def back(g):
            Tensor._accumulate(a, g * out_data)
        return self._make(out_data, (a,), back)

    def log(self) -> "Tensor":
        a = self
        if np.any(a.data <= 0):
            raise DomainError(f"log: non-positive input (min={a.data.min()})")

        def back(g):
            Tensor._accumulate(a, g / a.data)
        return self._make(np.log(a.data), (a,), back)

    # -- reductions ------------------------------------------------------------

    def sum(self) -> "Tensor":
        a = self

        def back(g):
            Tensor._accumulate(a, np.full_like(a.data, float(g)))
        return self._make(a.data.sum(), (a,), back)

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size

        def back(g):
            Tensor._accumulate(a, np.full_like(a.data, float(g) / n))
        return self._make(a.data.mean(), (a,), back)

    def max(self) -> "Tensor":
        a = self
        flat_idx = int(np.argmax(a.data))  # first maximum on ties

        def back(g):
            grad = np.zeros_like(a.data)
            grad.flat[flat_idx] = float(g)
            Tensor._accumulate(a, grad)
        return self._make(a.data.max(), (a,), back)

    # -- row-wise softmax family -------------------------------------------------

    def softmax_rows(self) -> "Tensor":
        a = self
        if a.ndim != 2 or a.shape[1] < 1:
            raise ShapeMismatchError("softmax_rows", a.shape)
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=1, keepdims=True)

        def back(g):
            dot = (g * out_data).sum(axis=1, keepdims=True)
            Tensor._accumulate(a, out_data * (g - dot))
        return self._make(out_data, (a,), back)

    def log_softmax_rows(self) -> "Tensor":
        a = self
        if a.ndim != 2 or a.shape[1] < 1:
            raise ShapeMismatchError("log_softmax_rows", a.shape)
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def back(g):
            Tensor._accumulate(a, g - soft * g.sum(axis=1, keepdims=True))
        return self._make(out_data, (a,), back)

    # -- index gathers --------------------------------------------------------

    def gather_rows(self, indices) -> "Tensor":
        """Rows of a 2-d table selected by an integer vector (embedding lookup)."""
        a = self
        idx = np.asarray(indices, dtype=np.int64)
        if a.ndim != 2 or idx.ndim != 1:
            raise ShapeMismatchError("gather_rows", a.shape, idx.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise IndexError(f"gather_rows: index out of range for table with {a.shape[0]} rows")

        def back(g):
            grad = np.zeros_like(a.data)
            np.add.at(grad, idx, g)
            Tensor._accumulate(a, grad)
        return self._make(a.data[idx], (a,), back)

    def take_per_row(self, columns) -> "Tensor":
        """One entry per row picked by a column index vector; returns (n, 1)."""
        a = self
        cols = np.asarray(columns, dtype=np.int64)
        if a.ndim != 2 or cols.ndim != 1 or cols.shape[0] != a.shape[0]:
            raise ShapeMismatchError("take_per_row", a.shape, cols.shape)
        if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
            raise IndexError(f"take_per_row: column index out of range for {a.shape[1]} columns")
        rows = np.arange(a.shape[0])

        def back(g):
            grad = np.zeros_like(a.data)
            np.add.at(grad, (rows, cols), g[:, 0])
            Tensor._accumulate(a, grad)
        return self._make(a.data[rows, cols][:, None], (a,), back)


# -- constructors ------------------------------------------------------------

def zeros(*shape, requires_grad=False, name="") -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(*shape, requires_grad=False, name="") -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def full(shape, value, requires_grad=False, name="") -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad, name=name)


# -- gradient verification -----------------------------------------------------

def grad_check(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map a tensor to a scalar tensor and be smooth at ``point``.
    Returns max over coordinates of |analytic - numeric| / max(|a|, |n|, 1e-8);
    never raises on a large error, only reports it.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x = Tensor(np.array(point.data, copy=True), requires_grad=True, name=point.name)
    out = fn(x)
    out.backward()
    analytic = x.grad_array().ravel().copy()

    flat = np.array(point.data, dtype=np.float64).ravel()
    shape = point.data.shape
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        f_plus = float(fn(Tensor(flat.reshape(shape))).data)
        flat[i] = saved - step
        f_minus = float(fn(Tensor(flat.reshape(shape))).data)
        flat[i] = saved
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
