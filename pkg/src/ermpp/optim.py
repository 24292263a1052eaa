"""Adam with per-parameter freeze masks, and the distance-from-init diagnostic."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ContractError
from .nn import MLP, Mode, ModelState
from .tensor import Tensor


class Phase(enum.Enum):
    HEAD = "head"
    ALL = "all"


@dataclass(frozen=True)
class FreezeMask:
    trainable: frozenset[str]

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def __len__(self) -> int:
        return len(self.trainable)


def warmstart_mask(model: MLP, phase: Phase) -> FreezeMask:
    """Head phase trains the classifier only; All trains everything learnable.

    BN gamma/beta are learnable only while BN is unfrozen.
    """
    if phase is Phase.HEAD:
        return FreezeMask(frozenset(model.head_names()))
    names = set(model.parameters())
    for bn in model.bn_layers().values():
        if bn.frozen:
            names -= {bn.gamma.name, bn.beta.name}
    return FreezeMask(frozenset(names))


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Each parameter keeps its own step count ``t[name]``, advanced only on
    steps where it is in the mask; a parameter unfrozen late therefore starts
    with zero moments and fresh bias correction. Weight decay is classic L2
    added to the gradient (inert at the default of 0).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        for b in (beta1, beta2):
            if not 0.0 < b < 1.0:
                raise ContractError(f"Adam betas must lie in (0, 1), got {b}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, grads: dict[str, np.ndarray], mask: FreezeMask) -> None:
        unknown = set(mask.trainable) - set(self.params)
        if unknown:
            raise ContractError(f"mask names unknown parameters: {sorted(unknown)}")
        missing = [k for k in self.params if k in mask and grads.get(k) is None]
        if missing:
            raise ContractError(f"missing gradient for trainable parameters: {missing}")
        for name, p in self.params.items():
            if name not in mask:
                continue
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            denom = np.sqrt(self.v[name]) / np.sqrt(bc2) + self.eps
            p.data = p.data - (self.lr / bc1) * self.m[name] / denom


def adam_step(opt: Adam, mask: FreezeMask, grads: dict[str, np.ndarray]) -> None:
    opt.step(grads, mask)


def l2_distance_from_init(current: ModelState, init: ModelState, keys=None) -> float:
    """Euclidean distance over parameters (BN running stats excluded)."""
    diff = set(current.params) ^ set(init.params)
    if diff:
        raise ArchitectureError(f"model state key mismatch: {sorted(diff)}")
    names = current.params if keys is None else keys
    total = 0.0
    for k in names:
        d = current.params[k] - init.params[k]
        total += float(np.sum(d * d))
    return float(np.sqrt(total))


def train_step(model: MLP, opt: Adam, x: np.ndarray, y: np.ndarray, mask: FreezeMask) -> float:
    """One forward/backward/update on a batch; returns the batch loss."""
    model.zero_grad()
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(model.forward(x, Mode.TRAIN), y)
        tape.backward(loss)
    params = model.parameters()
    opt.step({k: params[k].grad for k in mask.trainable}, mask)
    model.zero_grad()
    return loss.item()
