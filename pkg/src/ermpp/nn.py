"""Layer library and the backbone + classifier MLP.

The model is ``[Linear -> BatchNorm1d -> ReLU] * len(hidden_dims)`` followed
by a Linear classification head. Parameter names are stable and documented:

* ``block{i}.linear.weight`` (in x out), ``block{i}.linear.bias``
* ``block{i}.bn.gamma``, ``block{i}.bn.beta`` (only with batch norm)
* ``head.weight``, ``head.bias``

Running statistics live under the BN layer name ``block{i}.bn``.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ShapeError
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
HEAD_PREFIX = "head."


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    # normalize with batch statistics and update running stats; no training
    ACCUMULATE = "accumulate"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    use_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ArchitectureError(f"all model dimensions must be >= 1, got {dims}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "use_batchnorm": self.use_batchnorm,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelState:
    """Snapshot of a model: parameters, BN running statistics, step counter."""

    params: dict[str, np.ndarray]
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ModelState":
        return ModelState(
            {k: v.copy() for k, v in self.params.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_stats.items()},
            self.step,
        )

    def keys(self) -> tuple[list[str], list[str]]:
        return list(self.params), list(self.bn_stats)


def check_same_keys(a: ModelState, b: ModelState, *, bn: bool = True) -> None:
    """Raise ArchitectureError naming the symmetric difference of key sets."""
    diff = set(a.params) ^ set(b.params)
    if bn:
        diff |= {f"bn:{k}" for k in set(a.bn_stats) ^ set(b.bn_stats)}
    if diff:
        raise ArchitectureError(f"model state key mismatch: {sorted(diff)}")
    for k, v in a.params.items():
        if v.shape != b.params[k].shape:
            raise ArchitectureError(f"shape mismatch for {k}: {v.shape} vs {b.params[k].shape}")


def states_equal(a: ModelState, b: ModelState) -> bool:
    """Bitwise equality of two states (step included)."""
    if a.step != b.step or list(a.params) != list(b.params) or list(a.bn_stats) != list(b.bn_stats):
        return False
    for k, v in a.params.items():
        if v.shape != b.params[k].shape or v.tobytes() != b.params[k].tobytes():
            return False
    for k, (m, v) in a.bn_stats.items():
        bm, bv = b.bn_stats[k]
        if m.tobytes() != bm.tobytes() or v.tobytes() != bv.tobytes():
            return False
    return True


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        # Kaiming-uniform for ReLU networks
        bound = np.sqrt(6.0 / in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim), True, f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class BatchNorm1d:
    """Batch normalization over the batch axis of a B x C input.

    Running variance is updated with the unbiased batch variance while the
    normalization itself uses the biased one.

    A frozen layer keeps gamma, beta and both running statistics fixed and
    normalizes with the running statistics in every mode.
    """

    def __init__(self, channels: int, name: str, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.name = name
        self.gamma = Tensor(np.ones(channels), True, f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), True, f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        if mode is Mode.EVAL or self.frozen:
            return T.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        out, mean, var = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
        self.update_running(mean, var, x.shape[0])
        return out

    def update_running(self, batch_mean: np.ndarray, biased_var: np.ndarray, n: int) -> None:
        unbiased = biased_var * (n / (n - 1))
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * unbiased


class MLP:
    """Backbone of Linear/BN/ReLU blocks plus a linear classification head."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.spec = spec
        self.linears: list[Linear] = []
        self.norms: list[BatchNorm1d | None] = []
        prev = spec.input_dim
        for i, width in enumerate(spec.hidden_dims):
            self.linears.append(Linear(prev, width, rng, f"block{i}.linear"))
            self.norms.append(BatchNorm1d(width, f"block{i}.bn") if spec.use_batchnorm else None)
            prev = width
        self.head = Linear(prev, spec.num_classes, rng, "head")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lin, bn in zip(self.linears, self.norms):
            out[lin.weight.name] = lin.weight
            out[lin.bias.name] = lin.bias
            if bn is not None:
                out[bn.gamma.name] = bn.gamma
                out[bn.beta.name] = bn.beta
        out[self.head.weight.name] = self.head.weight
        out[self.head.bias.name] = self.head.bias
        return out

    def bn_layers(self) -> dict[str, BatchNorm1d]:
        return {bn.name: bn for bn in self.norms if bn is not None}

    def head_names(self) -> list[str]:
        return [self.head.weight.name, self.head.bias.name]

    def set_bn_frozen(self, frozen: bool) -> None:
        for bn in self.bn_layers().values():
            bn.frozen = frozen

    @property
    def bn_frozen(self) -> bool:
        return any(bn.frozen for bn in self.bn_layers().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, x, mode: Mode = Mode.EVAL) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected input of shape (B, {self.spec.input_dim}), got {x.shape}")
        h = x
        for lin, bn in zip(self.linears, self.norms):
            h = lin(h)
            if bn is not None:
                h = bn(h, mode)
            h = T.relu(h)
        return self.head(h)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return self.forward(x, Mode.EVAL).data.argmax(axis=1)


def build_model(spec: ModelSpec, rng: np.random.Generator | int = 0) -> MLP:
    return MLP(spec, rng)


def extract_state(model: MLP, step: int = 0) -> ModelState:
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    stats = {k: (bn.running_mean.copy(), bn.running_var.copy()) for k, bn in model.bn_layers().items()}
    return ModelState(params, stats, step)


def inject_state(model: MLP, state: ModelState) -> None:
    current = model.parameters()
    layers = model.bn_layers()
    diff = (set(current) ^ set(state.params)) | {f"bn:{k}" for k in set(layers) ^ set(state.bn_stats)}
    if diff:
        raise ArchitectureError(f"model state key mismatch: {sorted(diff)}")
    for k, p in current.items():
        if p.data.shape != state.params[k].shape:
            raise ArchitectureError(f"shape mismatch for {k}: {p.data.shape} vs {state.params[k].shape}")
    for k, p in current.items():
        p.data = state.params[k].copy()
    for k, bn in layers.items():
        mean, var = state.bn_stats[k]
        bn.running_mean = mean.copy()
        bn.running_var = var.copy()


def model_from_state(spec: ModelSpec, state: ModelState) -> MLP:
    model = MLP(spec, 0)
    inject_state(model, state)
    return model


def expected_keys(spec: ModelSpec) -> tuple[list[str], list[str]]:
    """Parameter and BN-stat key lists a model of ``spec`` produces."""
    params, stats = [], []
    for i in range(len(spec.hidden_dims)):
        params += [f"block{i}.linear.weight", f"block{i}.linear.bias"]
        if spec.use_batchnorm:
            params += [f"block{i}.bn.gamma", f"block{i}.bn.beta"]
            stats.append(f"block{i}.bn")
    params += ["head.weight", "head.bias"]
    return params, stats


def accuracy(spec: ModelSpec, state: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    model = model_from_state(spec, state)
    return float(np.mean(model.predict(x) == y))
