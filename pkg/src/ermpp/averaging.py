"""Weight-space averaging: within-trajectory running mean, BN-statistic
recomputation for the averaged model, and specialist averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiDomainDataset, balanced_batches, derive_seed
from .errors import ArchitectureError, ContractError
from .nn import BN_MOMENTUM, MLP, Mode, ModelSpec, ModelState, inject_state, extract_state
from .optim import Adam, Phase, train_step, warmstart_mask


class RunningAverage:
    """Incremental arithmetic mean of parameter iterates."""

    def __init__(self, burn_in_step: int = 0):
        self.burn_in_step = burn_in_step
        self.mean: dict[str, np.ndarray] | None = None
        self.count = 0

    def update(self, state: ModelState) -> None:
        if state.step < self.burn_in_step:
            raise ContractError(
                f"iterate from step {state.step} precedes burn-in step {self.burn_in_step}"
            )
        if self.mean is None:
            self.mean = {k: v.copy() for k, v in state.params.items()}
            self.count = 1
            return
        diff = set(self.mean) ^ set(state.params)
        if diff:
            raise ArchitectureError(f"model state key mismatch: {sorted(diff)}")
        self.count += 1
        for k, m in self.mean.items():
            self.mean[k] = m + (state.params[k] - m) / self.count

    def params(self) -> dict[str, np.ndarray]:
        if self.mean is None:
            raise ContractError("running average has no contributions yet")
        return {k: v.copy() for k, v in self.mean.items()}


def mpa_update(avg: RunningAverage, s: ModelState) -> None:
    avg.update(s)


class AveragedEvalModel:
    """Averaged parameters plus BN statistics accumulated by their own forward passes.

    The statistics start from the fresh-layer values (mean 0, var 1) unless
    ``bn_init`` is given, and are never derived from per-iterate statistics.
    """

    def __init__(self, spec: ModelSpec, average: RunningAverage, momentum: float = BN_MOMENTUM,
                 bn_init: dict[str, tuple[np.ndarray, np.ndarray]] | None = None):
        self.spec = spec
        self.average = average
        self._model = MLP(spec, 0)
        for bn in self._model.bn_layers().values():
            bn.momentum = momentum
            if bn_init is not None:
                bn.running_mean, bn.running_var = (a.copy() for a in bn_init[bn.name])
        self._synced = -1

    @property
    def bn_stats(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (bn.running_mean.copy(), bn.running_var.copy()) for k, bn in self._model.bn_layers().items()}

    def _sync_params(self) -> None:
        if self._synced == self.average.count:
            return
        mean = self.average.params()
        for k, p in self._model.parameters().items():
            p.data = mean[k]
        self._synced = self.average.count

    def accumulate(self, x: np.ndarray) -> None:
        if self.average.count == 0:
            raise ContractError("cannot accumulate BN statistics before any averaged iterate")
        self._sync_params()
        self._model.forward(x, Mode.ACCUMULATE)

    def state(self, step: int = 0) -> ModelState:
        return ModelState(self.average.params(), self.bn_stats, step)


def ubn_accumulate(eval_model: AveragedEvalModel, batch) -> None:
    x = batch.x if hasattr(batch, "x") else np.asarray(batch)
    eval_model.accumulate(x)


@dataclass(frozen=True)
class SMPAConfig:
    specialist_steps: int = 300
    per_domain_batch: int = 32
    recompute_batches: int = 50
    lr: float = 1e-3
    bn_frozen: bool = False
    seed: int = 0


def train_specialist(generalist: ModelState, spec: ModelSpec, ds: MultiDomainDataset, domain: str,
                     cfg: SMPAConfig, pool: np.ndarray | None = None) -> ModelState:
    """Fine-tune a copy of the generalist on one domain for ``cfg.specialist_steps``."""
    model = MLP(spec, 0)
    inject_state(model, generalist)
    model.set_bn_frozen(cfg.bn_frozen)
    opt = Adam(model.parameters(), lr=cfg.lr)
    mask = warmstart_mask(model, Phase.ALL)
    pools = None if pool is None else {domain: pool}
    # same stream for every specialist: identical data gives identical specialists
    batches = balanced_batches(ds, [domain], cfg.per_domain_batch, cfg.seed, pools)
    for _ in range(cfg.specialist_steps):
        b = next(batches)
        train_step(model, opt, b.x, b.y, mask)
    return extract_state(model, generalist.step + cfg.specialist_steps)


def merge_specialists(specialists: list[ModelState]) -> RunningAverage:
    avg = RunningAverage(0)
    for s in specialists:
        avg.update(s)
    return avg


def recompute_batch_stream(ds: MultiDomainDataset, domains: list[str], cfg: SMPAConfig,
                           pools: dict[str, np.ndarray] | None = None):
    """The exact batch sequence :func:`smpa` uses for BN recomputation."""
    return balanced_batches(ds, domains, cfg.per_domain_batch, derive_seed(cfg.seed, "smpa-recompute"), pools)


def smpa(generalist: ModelState, ds: MultiDomainDataset, domains: list[str], spec: ModelSpec,
         cfg: SMPAConfig, pools: dict[str, np.ndarray] | None = None) -> ModelState:
    """Average per-domain specialists branched from ``generalist``.

    BN running statistics of the merge are recomputed with
    ``cfg.recompute_batches`` balanced batches drawn from all source domains.
    """
    if len(domains) < 2:
        raise ContractError(f"specialist averaging needs at least 2 domains, got {len(domains)}")
    specialists = [
        train_specialist(generalist, spec, ds, d, cfg, None if pools is None else pools[d])
        for d in domains
    ]
    avg = merge_specialists(specialists)
    eval_model = AveragedEvalModel(spec, avg)
    if spec.use_batchnorm and not cfg.bn_frozen:
        batches = recompute_batch_stream(ds, domains, cfg, pools)
        for _ in range(cfg.recompute_batches):
            eval_model.accumulate(next(batches).x)
        stats = eval_model.bn_stats
    else:
        stats = {k: (m.copy(), v.copy()) for k, (m, v) in generalist.bn_stats.items()}
    return ModelState(avg.params(), stats, generalist.step + cfg.specialist_steps)
