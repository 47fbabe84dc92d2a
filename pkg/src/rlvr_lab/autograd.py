"""A small reverse-mode tape over numpy arrays.

Only the handful of ops the policy network needs are provided: matmul, add,
mul, gelu, layernorm, softmax, row gather and a fused log-softmax gather.
Every op records a closure that pushes the upstream gradient into its inputs;
``backward`` replays the tape in reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other: "Tensor | np.ndarray | float") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor | np.ndarray | float") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default ones) from this node to every leaf."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior grads are per-call scratch; only leaves accumulate across calls
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x: "Tensor | np.ndarray | float") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: "Tensor | np.ndarray | float", b: "Tensor | np.ndarray | float") -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, a.requires_grad or b.requires_grad, (a, b), _bw)


def mul(a: "Tensor | np.ndarray | float", b: "Tensor | np.ndarray | float") -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, a.requires_grad or b.requires_grad, (a, b), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``; ``b`` may be a 2-D weight shared across the batch."""
    out_data = a.data @ b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, a.requires_grad or b.requires_grad, (a, b), _bw)


def transpose_last(a: Tensor) -> Tensor:
    out_data = np.swapaxes(a.data, -1, -2)

    def _bw(g: np.ndarray) -> None:
        a._accumulate(np.swapaxes(g, -1, -2))

    return Tensor(out_data, a.requires_grad, (a,), _bw)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; powers written as products (np.power is slow on floats)
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    out_data = 0.5 * x * (1.0 + t)

    def _bw(g: np.ndarray) -> None:
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a._accumulate(g * d)

    return Tensor(out_data, a.requires_grad, (a,), _bw)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def _bw(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            da = inv / n * (
                n * gx
                - gx.sum(axis=-1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            a._accumulate(da)

    return Tensor(out_data, a.requires_grad or gain.requires_grad or bias.requires_grad,
                  (a, gain, bias), _bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get probability 0."""
    z = a.data if mask is None else np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g: np.ndarray) -> None:
        a._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return Tensor(p, a.requires_grad, (a,), _bw)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array (embedding lookup)."""
    out_data = table.data[index]

    def _bw(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(gt)

    return Tensor(out_data, table.requires_grad, (table,), _bw)


def log_softmax_gather(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Log-probability of ``targets`` under softmax(logits) along the last axis."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out_data = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def _bw(g: np.ndarray) -> None:
        d = -np.exp(logp) * g[..., None]
        np.put_along_axis(
            d, targets[..., None],
            np.take_along_axis(d, targets[..., None], axis=-1) + g[..., None], axis=-1,
        )
        logits._accumulate(d)

    return Tensor(out_data, logits.requires_grad, (logits,), _bw)
