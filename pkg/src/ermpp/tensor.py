"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active record a node holding
their inputs, output and a backward rule. ``tape.backward(loss)`` walks the
nodes in exact reverse recording order and accumulates gradients into the
``grad`` field of every leaf tensor with ``requires_grad=True``.

The tape is rebuilt every step (define-by-run). Outside an active tape the
ops are plain numpy computations and record nothing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError

DTYPE = np.float64


class Tensor:
    """Dense array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of operations, used as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.requires_grad = True
        output._tape = self
        self.nodes.append(Node(inputs, output, backward, op))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad leaf.

        Repeated calls without zeroing accumulate; the training loop resets
        gradients between steps.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced by this tape")
        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ContractError("loss was not produced by a live tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _maybe_record(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _maybe_record("matmul", (a, b), out, back)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C bias to every row of a B x C tensor."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias-add dimension mismatch: {x.shape} + {bias.shape}")
    out = Tensor(x.data + bias.data)

    def back(g):
        return g, g.sum(axis=0)

    return _maybe_record("add_bias", (x, bias), out, back)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out = Tensor(np.where(positive, x.data, 0.0))

    def back(g):
        # subgradient at exactly 0 is 0
        return (g * positive,)

    return _maybe_record("relu", (x,), out, back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be B x C, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integer class indices, got dtype {labels.dtype}")
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"label out of range [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    out = Tensor(-log_probs[rows, labels].mean())

    def back(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _maybe_record("softmax_cross_entropy", (logits,), out, back)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize with batch statistics.

    Returns ``(output, batch_mean, biased_batch_var)``; the statistics are
    plain arrays for the caller's running-average update.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_bn_shapes(x, gamma, beta)
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"train-mode batch norm needs a batch of at least 2, got {n}")
    mean = x.data.mean(axis=0)
    centered = x.data - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = Tensor(gamma.data * x_hat + beta.data)

    def back(g):
        d_gamma = (g * x_hat).sum(axis=0)
        d_beta = g.sum(axis=0)
        d_xhat = g * gamma.data
        d_x = (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0)
        )
        return d_x, d_gamma, d_beta

    out = _maybe_record("batch_norm_train", (x, gamma, beta), out, back)
    return out, mean, var


def batch_norm_eval(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, eps: float
) -> Tensor:
    """Normalize with fixed statistics; gradients flow to x, gamma and beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_bn_shapes(x, gamma, beta)
    inv_std = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    x_hat = (x.data - running_mean) * inv_std
    out = Tensor(gamma.data * x_hat + beta.data)

    def back(g):
        return g * (gamma.data * inv_std), (g * x_hat).sum(axis=0), g.sum(axis=0)

    return _maybe_record("batch_norm_eval", (x, gamma, beta), out, back)


def _check_bn_shapes(x: Tensor, gamma: Tensor, beta: Tensor) -> None:
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batch norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights; used to probe gradients."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} does not match {x.shape}")
    out = Tensor(np.sum(x.data * w))

    def back(g):
        return (g * w,)

    return _maybe_record("weighted_sum", (x,), out, back)
