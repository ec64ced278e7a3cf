"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every value is a C-contiguous float64
ndarray, operations record a VJP closure on the output node, and
``backward`` replays the tape in reverse topological order.  Accumulation
order is fixed by construction order, so repeated runs are bit-identical.

Graphs are confined to one logical thread while being built and
differentiated; finished parameter snapshots are plain arrays and can be
shared read-only across threads.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _contig(arr: np.ndarray) -> np.ndarray:
    """C-contiguous view/copy that, unlike ascontiguousarray, keeps 0-d shapes."""
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional gradient slot and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _contig(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

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
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._result(a.data - b.data, (a, b), vjp)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), vjp)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._coerce(other) / self

    def __neg__(self) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), vjp)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        a = self
        out_data = a.data[key]

        def vjp(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)

        return Tensor._result(_contig(out_data), (a,), vjp)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))

        return Tensor._result(a.data.reshape(shape), (a,), vjp)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g.swapaxes(ax1, ax2))

        return Tensor._result(_contig(a.data.swapaxes(ax1, ax2)), (a,), vjp)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def vjp(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along one axis; the gradient flows to the first argmax."""
        a = self
        idx = np.argmax(a.data, axis=axis)
        out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)

        def vjp(g):
            if not a.requires_grad:
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
            a._accumulate(full)

        return Tensor._result(_contig(out_data), (a,), vjp)

    def min(self, axis: int, keepdims: bool = False) -> "Tensor":
        return -((-self).max(axis=axis, keepdims=keepdims))

    # -- elementwise transcendental --------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), vjp)

    def log(self) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), vjp)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out_data)

        return Tensor._result(out_data, (a,), vjp)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (a,), vjp)

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be scalar.  Gradients accumulate additively across
        fan-out; repeated calls keep accumulating unless grads are cleared.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._vjp is not None:
                node._vjp(node.grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked (leading-axis) broadcasting.

    Inner extents must agree; a mismatch raises DimensionError naming both
    shapes.  Gradients sum over broadcast leading axes.
    """
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def vjp(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(out_data, (a, b), vjp)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [Tensor._coerce(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(_contig(g[tuple(sl)]))

    return Tensor._result(out_data, tuple(parts), vjp)


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [Tensor._coerce(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(_contig(np.take(g, i, axis=axis)))

    return Tensor._result(out_data, tuple(parts), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``: the max is subtracted before exp."""
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = Tensor._coerce(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = m + np.log(s)
    soft = e / s
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def vjp(g):
        if x.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(soft * g)

    return Tensor._result(_contig(out_data), (x,), vjp)


def softmin(x: Tensor, temperature: float, axis: int = -1) -> Tensor:
    """Smoothed minimum: -t*log(sum(exp(-x/t))) along ``axis``."""
    return logsumexp(x * (-1.0 / temperature), axis=axis) * (-temperature)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    c = np.sqrt(2.0 / np.pi)
    inner = (x + x * x * x * 0.044715) * c
    return x * (inner.tanh() + 1.0) * 0.5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


class ParamRegistry:
    """Named parameter tensors with a per-entry frozen flag.

    Every parameter object is registered exactly once; frozen entries never
    require grad and are never touched by optimizers.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self._ids: set[int] = set()

    def add(self, name: str, value: Tensor, frozen: bool) -> Tensor:
        if name in self._entries:
            raise ContractError(f"parameter {name!r} registered twice")
        if id(value) in self._ids:
            raise ContractError(f"tensor for {name!r} already registered under another name")
        value.requires_grad = not frozen
        self._entries[name] = value
        self._ids.add(id(value))
        if frozen:
            self._frozen.add(name)
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def items(self):
        return self._entries.items()

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._entries.items() if n not in self._frozen}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._entries.items() if n in self._frozen}

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.size for t in self._entries.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}
