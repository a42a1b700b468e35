"""Reverse-mode tensor core: a numpy buffer plus a backward tape."""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementary ops (backward support limited to what the models need) --

    def __add__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return _binary(self, other, self.data + other.data,
                       lambda g: _unbroadcast(g, self.data.shape),
                       lambda g: _unbroadcast(g, other.data.shape))

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return _binary(self, other, self.data - other.data,
                       lambda g: _unbroadcast(g, self.data.shape),
                       lambda g: _unbroadcast(-g, other.data.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _binary(self, other, self.data * other.data,
                           lambda g: _unbroadcast(g * other.data, self.data.shape),
                           lambda g: _unbroadcast(g * self.data, other.data.shape))
        c = float(other)
        return _unary(self, self.data * c, lambda g: g * c)

    __rmul__ = __mul__

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __getitem__(self, key):
        def bwd(g, key=key):
            gx = np.zeros_like(self.data)
            np.add.at(gx, key, g)
            return gx
        return _unary(self, self.data[key], bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(old))

    def sum(self):
        return _unary(self, np.asarray(self.data.sum(), dtype=self.data.dtype),
                      lambda g: np.broadcast_to(g, self.data.shape).copy())

    def mean(self, axis=None):
        if axis is None:
            n = self.data.size
            return _unary(self, np.asarray(self.data.mean(), dtype=self.data.dtype),
                          lambda g: np.broadcast_to(g / n, self.data.shape).astype(self.data.dtype))
        n = self.data.shape[axis]
        def bwd(g, axis=axis, n=n):
            return np.repeat(np.expand_dims(g, axis) / n, n, axis=axis)
        return _unary(self, self.data.mean(axis=axis), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _needs_grad(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _unary(x: Tensor, out_data: np.ndarray, bwd) -> Tensor:
    if not _needs_grad(x):
        return Tensor(out_data)
    def backward(g):
        _accumulate(x, bwd(g))
    return Tensor(out_data, requires_grad=True, _parents=(x,), _backward=backward)


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray, bwd_a, bwd_b) -> Tensor:
    if not _needs_grad(a, b):
        return Tensor(out_data)
    def backward(g):
        if a.requires_grad:
            _accumulate(a, bwd_a(g))
        if b.requires_grad:
            _accumulate(b, bwd_b(g))
    return Tensor(out_data, requires_grad=True, _parents=(a, b), _backward=backward)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a child's grad buffer (e.g. reshape backward)
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g
