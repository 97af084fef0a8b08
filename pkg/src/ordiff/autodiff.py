"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the denoiser needs. Gradients are accumulated into
``Tensor.grad`` by ``backward()`` on a scalar output; every op's vector-
Jacobian product is hand-written and checked against finite differences in
the test suite.
"""

from __future__ import annotations

import math

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach its shape."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # ---- graph walk ----

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # ---- elementwise / arithmetic ----

    def __add__(self, other):
        other = _const(other)
        return Tensor(
            self.data + other.data,
            _parents=(self, other),
            _vjp=lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _vjp=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_const(other))

    def __rsub__(self, other):
        return _const(other) + (-self)

    def __mul__(self, other):
        other = _const(other)
        return Tensor(
            self.data * other.data,
            _parents=(self, other),
            _vjp=lambda g: (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _const(other)
        return Tensor(
            self.data / other.data,
            _parents=(self, other),
            _vjp=lambda g: (
                _unbroadcast(g / other.data, self.data.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape),
            ),
        )

    def __pow__(self, exponent: float):
        return Tensor(
            self.data**exponent,
            _parents=(self,),
            _vjp=lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = _const(other)
        a, b = self.data, other.data
        if b.ndim == 2 and a.ndim > 2:
            # Stacked @ weight: fold leading dims into one GEMM.
            a2 = a.reshape(-1, a.shape[-1])
            out = (a2 @ b).reshape(*a.shape[:-1], b.shape[1])

            def vjp2(g):
                g2 = g.reshape(-1, b.shape[1])
                return (g2 @ b.T).reshape(a.shape), a2.T @ g2

            return Tensor(out, _parents=(self, other), _vjp=vjp2)

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor(a @ b, _parents=(self, other), _vjp=vjp)

    # ---- shape ----

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(
            self.data.reshape(*shape), _parents=(self,), _vjp=lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor(
            self.data.transpose(*axes), _parents=(self,), _vjp=lambda g: (g.transpose(*inv),)
        )

    def sum(self, axis=None, keepdims: bool = False):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _vjp=vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- nonlinearities ----


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, _parents=(x,), _vjp=lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), _parents=(x,), _vjp=lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, _parents=(x,), _vjp=lambda g: (g * (1.0 - out**2),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    sq = d * d
    u = _GELU_C * (d + 0.044715 * (sq * d))
    th = np.tanh(u)
    out = 0.5 * d * (1.0 + th)
    du = _GELU_C * (1.0 + (3 * 0.044715) * sq)
    deriv = 0.5 * (1.0 + th) + 0.5 * d * ((1.0 - th * th) * du)
    return Tensor(out, _parents=(x,), _vjp=lambda g: (g * deriv,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    D = x.data.shape[-1]

    def vjp(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        dx = inv / D * (
            D * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor(out, _parents=(x, gain, bias), _vjp=vjp)


# ---- indexing ----


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def vjp(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids, g)
        return (dw,)

    return Tensor(weight.data[ids], _parents=(weight,), _vjp=vjp)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)[..., None]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g[..., None], axis=-1)
        return (dx,)

    return Tensor(np.take_along_axis(x.data, idx, axis=-1)[..., 0], _parents=(x,), _vjp=vjp)
