"""Self-contained oracle suites run by ``ermpp verify``.

Each suite compares library output against an independent computation
(finite differences, scalar recurrences, batch means) and reports the worst
observed error next to its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .averaging import AveragedEvalModel, RunningAverage
from .data import rng_stream
from .nn import BN_EPS, BN_MOMENTUM, MLP, ModelSpec, ModelState, extract_state
from .optim import Adam, FreezeMask, Phase, train_step, warmstart_mask
from .tensor import Tape, Tensor


@dataclass
class SuiteResult:
    name: str
    quantity: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        cmp = "<=" if self.passed else ">"
        return f"{status} {self.name:<10} {self.quantity} = {self.value:.3e} {cmp} {self.tolerance:.0e}"


def central_diff(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable op on one random instance."""
    b, n, m = rng.integers(2, 6), rng.integers(1, 5), rng.integers(1, 5)
    x = rng.normal(size=(b, n))
    x[np.abs(x) < 1e-3] = 0.1  # keep relu away from its kink
    labels = rng.integers(0, n, b)
    rm, rv = rng.normal(size=n), rng.uniform(0.5, 2.0, n)
    return [
        ("matmul", T.matmul, [x, rng.normal(size=(n, m))]),
        ("add_bias", T.add_bias, [x, rng.normal(size=n)]),
        ("relu", T.relu, [x]),
        ("cross_entropy", lambda z: T.softmax_cross_entropy(z, labels), [x]),
        ("bn_train", lambda z, g, be: T.batch_norm_train(z, g, be, BN_EPS)[0],
         [x, rng.normal(size=n), rng.normal(size=n)]),
        ("bn_eval", lambda z, g, be: T.batch_norm_eval(z, g, be, rm, rv, BN_EPS),
         [x, rng.normal(size=n), rng.normal(size=n)]),
    ]


def gradient_errors(instances: int = 100, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op between tape gradients and central differences."""
    rng = rng_stream(seed, "verify-gradients")
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, fn, arrays in _op_cases(rng):
            tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
            out = fn(*tensors)
            w = rng.normal(size=out.shape)
            with Tape() as tape:
                tape.backward(T.weighted_sum(fn(*tensors), w))
            for t in tensors:
                num = central_diff(lambda: float(np.sum(fn(*tensors).data * w)), t.data, h)
                worst[name] = max(worst.get(name, 0.0), rel_err(t.grad, num))
    return worst


def suite_gradients(instances: int = 100) -> SuiteResult:
    errs = gradient_errors(instances)
    name = max(errs, key=errs.get)
    return SuiteResult("gradients", f"max rel err ({name})", errs[name], 1e-4)


def adam_oracle(p0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8) -> list[list[float]]:
    """Scalar Adam recurrences, one coordinate at a time."""
    p, m, v, out = list(p0), [0.0] * len(p0), [0.0] * len(p0), []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            p[i] -= lr * (m[i] / (1 - b1 ** t)) / ((v[i] / (1 - b2 ** t)) ** 0.5 + eps)
        out.append(list(p))
    return out


def suite_adam() -> list[SuiteResult]:
    p = Tensor([1.0])
    Adam({"p": p}, lr=0.1).step({"p": np.array([1.0])}, FreezeMask(frozenset({"p"})))
    single = abs(float(p.data[0]) - adam_oracle([1.0], lambda q: [1.0], 1, 0.1)[0][0])

    def grad(q):
        return [3 * q[0] + q[1], q[0] + q[1]]

    q = Tensor([1.5, -2.0])
    opt = Adam({"q": q}, lr=0.05)
    mask = FreezeMask(frozenset({"q"}))
    ref = adam_oracle([1.5, -2.0], grad, 50, 0.05)
    traj = 0.0
    for t in range(50):
        opt.step({"q": np.array(grad(list(q.data)))}, mask)
        traj = max(traj, float(np.max(np.abs(q.data - ref[t]))))
    return [SuiteResult("adam", "single-step abs err", single, 1e-12),
            SuiteResult("adam", "50-step trajectory abs err", traj, 1e-10)]


def _random_states(n: int, seed: int, spec: ModelSpec) -> list[ModelState]:
    rng = rng_stream(seed, "verify-states")
    out = []
    for _ in range(n):
        s = extract_state(MLP(spec, rng))
        out.append(ModelState({k: rng.normal(size=v.shape) for k, v in s.params.items()}, s.bn_stats, 0))
    return out


def suite_mpa() -> SuiteResult:
    spec = ModelSpec(3, (4,), 2)
    states = _random_states(7, 0, spec)
    fwd, rev = RunningAverage(), RunningAverage()
    for s in states:
        fwd.update(s)
    for s in reversed(states):
        rev.update(s)
    err = 0.0
    for k in states[0].params:
        batch = np.mean([s.params[k] for s in states], axis=0)
        err = max(err, float(np.max(np.abs(fwd.params()[k] - batch))))
        err = max(err, float(np.max(np.abs(fwd.params()[k] - rev.params()[k]))))
    return SuiteResult("mpa", "max abs err vs batch mean", err, 1e-12)


def suite_ema(k: int = 5) -> SuiteResult:
    spec = ModelSpec(3, (4, 3), 2)
    (state,) = _random_states(1, 1, spec)
    avg = RunningAverage()
    avg.update(state)
    ev = AveragedEvalModel(spec, avg)
    x = rng_stream(1, "verify-ema").normal(size=(16, 3))
    for _ in range(k):
        ev.accumulate(x)
    # hand forward of the averaged parameters, batch statistics per layer
    err, h = 0.0, x
    for i in range(len(spec.hidden_dims)):
        p = state.params
        z = h @ p[f"block{i}.linear.weight"] + p[f"block{i}.linear.bias"]
        mu, var_b, var_u = z.mean(0), z.var(0), z.var(0, ddof=1)
        decay = (1 - BN_MOMENTUM) ** k
        want_m = (1 - decay) * mu
        want_v = decay * 1.0 + (1 - decay) * var_u
        got_m, got_v = ev.bn_stats[f"block{i}.bn"]
        err = max(err, float(np.max(np.abs(got_m - want_m))), float(np.max(np.abs(got_v - want_v))))
        h = np.maximum((z - mu) / np.sqrt(var_b + BN_EPS) * p[f"block{i}.bn.gamma"] + p[f"block{i}.bn.beta"], 0)
    return SuiteResult("ema", f"max abs err after {k} passes", err, 1e-12)


def suite_freeze(warmstart: int = 20) -> SuiteResult:
    """Head-only phase leaves every backbone parameter and its moments untouched."""
    spec = ModelSpec(2, (5,), 3)
    model = MLP(spec, rng_stream(2, "verify-freeze"))
    init = {k: p.data.copy() for k, p in model.parameters().items()}
    opt = Adam(model.parameters(), lr=0.01)
    mask = warmstart_mask(model, Phase.HEAD)
    rng = rng_stream(2, "verify-freeze-data")
    for _ in range(warmstart):
        train_step(model, opt, rng.normal(size=(8, 2)), rng.integers(0, 3, 8), mask)
    moved = 0
    for k, p in model.parameters().items():
        if k in mask:
            continue
        moved += int(p.data.tobytes() != init[k].tobytes())
        moved += int(np.any(opt.m[k] != 0) or np.any(opt.v[k] != 0) or opt.t[k] != 0)
    head_moved = any(model.parameters()[k].data.tobytes() != init[k].tobytes() for k in mask.trainable)
    return SuiteResult("freeze", "changed frozen entries", float(moved + (not head_moved)), 0.0)


SUITES: dict[str, Callable[[], SuiteResult | list[SuiteResult]]] = {
    "gradients": lambda: suite_gradients(20),
    "adam": suite_adam,
    "mpa": suite_mpa,
    "ema": suite_ema,
    "freeze": suite_freeze,
}


def run_all() -> list[SuiteResult]:
    out: list[SuiteResult] = []
    for fn in SUITES.values():
        res = fn()
        out.extend(res if isinstance(res, list) else [res])
    return out
