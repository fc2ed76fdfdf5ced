"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the engine is a `Tensor` wrapping a C-order
float64 ndarray.  Operations build a graph of backward closures; calling
`backward()` on a scalar result replays the closures in reverse topological
order and accumulates gradients additively into every `requires_grad` leaf.
Callers must zero gradients between optimizer steps.

Nodes whose inputs carry no gradient requirement record nothing, so a
forward pass through frozen parameters is plain numpy with no tape cost.

Operations that can leave the real domain (div, log, sqrt) validate their
output and raise instead of silently producing NaN/Inf.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import DimensionError, DomainError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A float64 ndarray with an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @staticmethod
    def _make(data: np.ndarray, prev: tuple[Tensor, ...], backward) -> Tensor:
        """Internal node constructor; prunes the tape at no-grad boundaries."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in prev):
            out.requires_grad = True
            out._prev = prev
            out._backward = backward
        else:
            out.requires_grad = False
            out._prev = ()
            out._backward = None
        return out

    # -- bookkeeping ------------------------------------------------------

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
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """A view of the same data with no gradient history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        out = Tensor._make(self.data + other.data, (self, other), None)
        if out.requires_grad:
            def _bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.shape))
            out._backward = _bwd
        return out

    def __sub__(self, other) -> Tensor:
        other = _as_tensor(other)
        out = Tensor._make(self.data - other.data, (self, other), None)
        if out.requires_grad:
            def _bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g, b.shape))
            out._backward = _bwd
        return out

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        out = Tensor._make(self.data * other.data, (self, other), None)
        if out.requires_grad:
            def _bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.shape))
            out._backward = _bwd
        return out

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        data = self.data / np.where(other.data == 0.0, np.nan, other.data)
        if not np.all(np.isfinite(data)):
            raise DomainError("division produced non-finite values")
        out = Tensor._make(data, (self, other), None)
        if out.requires_grad:
            def _bwd(g, a=self, b=other, y=data):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * y / b.data, b.shape))
            out._backward = _bwd
        return out

    def __neg__(self) -> Tensor:
        out = Tensor._make(-self.data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self):
                a._accum(-g)
            out._backward = _bwd
        return out

    def __radd__(self, other) -> Tensor:
        return self.__add__(other)

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other).__sub__(self)

    def __rmul__(self, other) -> Tensor:
        return self.__mul__(other)

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other).__truediv__(self)

    def __pow__(self, exponent: float) -> Tensor:
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** exponent
        if not np.all(np.isfinite(data)):
            raise DomainError(f"pow({exponent}) produced non-finite values")
        out = Tensor._make(data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, e=exponent):
                a._accum(g * e * a.data ** (e - 1))
            out._backward = _bwd
        return out

    def __matmul__(self, other) -> Tensor:
        return self.matmul(other)

    def matmul(self, other: Tensor) -> Tensor:
        """Matrix product with numpy batch-broadcast semantics (ndim >= 2)."""
        other = _as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise DimensionError("matmul operands must have ndim >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {self.shape} vs {other.shape}")
        out = Tensor._make(self.data @ other.data, (self, other), None)
        if out.requires_grad:
            def _bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))
            out._backward = _bwd
        return out

    # -- shape manipulation -------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> Tensor:
        shape = tuple(shape)
        out = Tensor._make(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self):
                a._accum(g.reshape(a.shape))
            out._backward = _bwd
        return out

    def transpose(self, axes: Sequence[int]) -> Tensor:
        axes = tuple(axes)
        out = Tensor._make(np.transpose(self.data, axes), (self,), None)
        if out.requires_grad:
            inv = tuple(np.argsort(axes))
            def _bwd(g, a=self, inv=inv):
                a._accum(np.transpose(g, inv))
            out._backward = _bwd
        return out

    def swapaxes(self, a1: int, a2: int) -> Tensor:
        out = Tensor._make(self.data.swapaxes(a1, a2), (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, a1=a1, a2=a2):
                a._accum(g.swapaxes(a1, a2))
            out._backward = _bwd
        return out

    def __getitem__(self, key) -> Tensor:
        out = Tensor._make(self.data[key], (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, key=key):
                buf = np.zeros_like(a.data)
                buf[key] += g
                a._accum(buf)
            out._backward = _bwd
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        out = Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, axis=axis, keepdims=keepdims):
                a._accum(_expand_reduced(g, a.shape, axis, keepdims))
            out._backward = _bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        out = Tensor._make(self.data.mean(axis=axis, keepdims=keepdims), (self,), None)
        if out.requires_grad:
            scale = self.data.size / out.data.size
            def _bwd(g, a=self, axis=axis, keepdims=keepdims, scale=scale):
                a._accum(_expand_reduced(g, a.shape, axis, keepdims) / scale)
            out._backward = _bwd
        return out

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self) -> Tensor:
        data = np.exp(self.data)
        if not np.all(np.isfinite(data)):
            raise DomainError("exp overflow")
        out = Tensor._make(data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, y=data):
                a._accum(g * y)
            out._backward = _bwd
        return out

    def log(self) -> Tensor:
        if np.any(self.data <= 0.0):
            raise DomainError("log of non-positive value")
        out = Tensor._make(np.log(self.data), (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self):
                a._accum(g / a.data)
            out._backward = _bwd
        return out

    def sqrt(self) -> Tensor:
        if np.any(self.data < 0.0):
            raise DomainError("sqrt of negative value")
        data = np.sqrt(self.data)
        out = Tensor._make(data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, y=data):
                a._accum(g * 0.5 / np.where(y == 0.0, np.inf, y))
            out._backward = _bwd
        return out

    def tanh(self) -> Tensor:
        data = np.tanh(self.data)
        out = Tensor._make(data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, y=data):
                a._accum(g * (1.0 - y * y))
            out._backward = _bwd
        return out

    def abs(self) -> Tensor:
        out = Tensor._make(np.abs(self.data), (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self):
                a._accum(g * np.sign(a.data))
            out._backward = _bwd
        return out

    def clip(self, lo: float | None, hi: float | None) -> Tensor:
        """Clamp to [lo, hi]; gradient passes only where the input is inside."""
        out = Tensor._make(np.clip(self.data, lo, hi), (self,), None)
        if out.requires_grad:
            mask = np.ones_like(self.data)
            if lo is not None:
                mask *= self.data >= lo
            if hi is not None:
                mask *= self.data <= hi
            def _bwd(g, a=self, mask=mask):
                a._accum(g * mask)
            out._backward = _bwd
        return out

    def gelu(self) -> Tensor:
        """Exact (erf-based) Gaussian error linear unit."""
        x = self.data
        cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        out = Tensor._make(x * cdf, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, cdf=cdf):
                pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
                a._accum(g * (cdf + a.data * pdf))
            out._backward = _bwd
        return out

    def softmax(self, axis: int = -1) -> Tensor:
        """Numerically stable softmax along one axis."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)
        out = Tensor._make(s, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, s=s, axis=axis):
                inner = (g * s).sum(axis=axis, keepdims=True)
                a._accum(s * (g - inner))
            out._backward = _bwd
        return out

    def log_softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        data = shifted - lse
        out = Tensor._make(data, (self,), None)
        if out.requires_grad:
            def _bwd(g, a=self, data=data, axis=axis):
                soft = np.exp(data)
                a._accum(g - soft * g.sum(axis=axis, keepdims=True))
            out._backward = _bwd
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradients split back to the operands."""
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._make(data, tuple(tensors), None)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bwd(g, parts=tensors, offsets=offsets, axis=axis):
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(g[tuple(idx)])
        out._backward = _bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the learned affine pair."""
    mu = x.data.mean(axis=-1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = d * inv
    out = Tensor._make(y * gamma.data + beta.data, (x, gamma, beta), None)
    if out.requires_grad:
        def _bwd(g, x=x, gamma=gamma, beta=beta, y=y, inv=inv):
            lead = tuple(range(g.ndim - 1))
            if beta.requires_grad:
                beta._accum(g.sum(axis=lead))
            if gamma.requires_grad:
                gamma._accum((g * y).sum(axis=lead))
            if x.requires_grad:
                gy = g * gamma.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * y).mean(axis=-1, keepdims=True)
                x._accum(inv * (gy - m1 - y * m2))
        out._backward = _bwd
    return out


def percentile(x, p: float) -> float:
    """Linear-interpolation percentile of the flattened data.

    Sorted values s[0..n-1] are interpolated at fractional rank
    p/100 * (n-1), the common "linear" convention.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    flat = data.reshape(-1)
    if flat.size == 0:
        raise DomainError("percentile of an empty tensor")
    if not 0.0 <= p <= 100.0:
        raise DomainError(f"percentile fraction {p} outside [0, 100]")
    s = np.sort(flat)
    rank = (p / 100.0) * (s.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, s.size - 1)
    frac = rank - lo
    return float(s[lo] * (1.0 - frac) + s[hi] * frac)
