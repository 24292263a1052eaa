"""The ERM++ training loop, the two-pass protocol, and the evaluation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from pathlib import Path
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .averaging import AveragedEvalModel, RunningAverage, SMPAConfig, smpa
from .checkpoint import save_checkpoint, state_digest
from .data import (
    DomainBatch,
    MultiDomainDataset,
    balanced_batches,
    dataset_bytes,
    derive_seed,
    resampled_batches,
    rng_stream,
    split,
)
from .errors import ConfigError
from .nn import MLP, ModelSpec, ModelState, accuracy, extract_state, inject_state
from .optim import Adam, Phase, l2_distance_from_init, train_step, warmstart_mask
from .pretrain import PretrainConfig, apply_backbone, pretrain_backbone

Validator = Callable[[int, ModelState], float]


@dataclass(frozen=True)
class TrainSchedule:
    """Step budget and phase boundaries, plus the per-step hyperparameters.

    ``mpa_burn_in=None`` derives the burn-in: 100 steps, or warmstart + 100
    when warmstart is on.
    """

    total_steps: int = 3000
    warmstart_steps: int = 500
    mpa_burn_in: int | None = None
    val_every: int = 100
    long_train_multiplier: float = 4.0
    early_stop_step: int | None = None
    per_domain_batch: int = 32
    lr: float = 1e-3
    split_fraction: float = 0.2

    def resolve(self, toggles: "ComponentToggles") -> "TrainSchedule":
        """Apply the toggles: LT scales the budget, WS off zeroes the warmstart."""
        total = self.total_steps
        if toggles.lt:
            total = int(round(total * self.long_train_multiplier))
        ws = self.warmstart_steps if toggles.ws else 0
        burn_in = self.mpa_burn_in
        if burn_in is None:
            burn_in = ws + 100 if ws else 100
        out = replace(self, total_steps=total, warmstart_steps=ws, mpa_burn_in=burn_in)
        out.validate()
        return out

    def validate(self) -> None:
        if self.total_steps < 0 or self.warmstart_steps < 0 or self.val_every < 1:
            raise ConfigError(f"invalid schedule {self}")
        if self.warmstart_steps and self.mpa_burn_in is not None and self.mpa_burn_in < self.warmstart_steps + 100:
            raise ConfigError(
                f"mpa_burn_in={self.mpa_burn_in} must be >= warmstart_steps + 100 = {self.warmstart_steps + 100}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ComponentToggles:
    mpa: bool = False
    fd: bool = False
    lt: bool = False
    ws: bool = False
    es: bool = False
    strong_init: bool = False
    ubn: bool = True
    sampler: str = "balanced"

    def __post_init__(self):
        if self.sampler not in ("balanced", "resampled"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def marks(self) -> str:
        return " ".join(
            name.upper() if getattr(self, key) else "-"
            for key, name in (("mpa", "mpa"), ("fd", "fd"), ("lt", "lt"), ("ws", "ws"),
                              ("es", "es"), ("strong_init", "sinit"), ("ubn", "ubn"))
        )


def _row(*flags: int) -> ComponentToggles:
    mpa, fd, lt, ws, es, si, ubn = (bool(f) for f in flags)
    return ComponentToggles(mpa=mpa, fd=fd, lt=lt, ws=ws, es=es, strong_init=si, ubn=ubn)


# rows of the component ablation; 1 is the ERM baseline, 7 is full ERM++
ABLATION_ROWS: dict[int, ComponentToggles] = {
    1: _row(0, 0, 0, 0, 0, 0, 1),
    2: _row(1, 0, 0, 0, 0, 0, 1),
    3: _row(1, 1, 0, 0, 0, 0, 1),
    4: _row(1, 1, 1, 0, 0, 0, 1),
    5: _row(1, 1, 1, 1, 0, 0, 1),
    6: _row(1, 1, 1, 1, 1, 0, 1),
    7: _row(1, 1, 1, 1, 1, 1, 1),
    8: _row(1, 1, 0, 1, 1, 1, 1),
    9: _row(1, 1, 1, 1, 1, 1, 0),
}
ERM = ABLATION_ROWS[1]
ERMPP = ABLATION_ROWS[7]


@dataclass
class TrainTrace:
    steps_run: int = 0
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    mpa_count: int = 0
    ubn_updates: int = 0
    averaged: bool = False


def train_ermpp(
    model: MLP,
    data: Iterator[DomainBatch],
    schedule: TrainSchedule,
    toggles: ComponentToggles,
    seed: int = 0,
    *,
    validate: Validator | None = None,
    on_step: Callable[[int, MLP, Adam], None] | None = None,
) -> tuple[ModelState, TrainTrace]:
    """Run the loop on an already-resolved schedule.

    Steps ``1..warmstart_steps`` update the head only, later steps every
    trainable parameter. From ``mpa_burn_in`` on, each iterate joins the
    running average (mpa) and the current batch is forwarded through the
    averaged model to accumulate its BN statistics (mpa and ubn). Returns the
    evaluation state: the average when one exists, else the final iterate.
    """
    schedule.validate()
    model.set_bn_frozen(not toggles.ubn)
    opt = Adam(model.parameters(), lr=schedule.lr)
    head_mask = warmstart_mask(model, Phase.HEAD)
    all_mask = warmstart_mask(model, Phase.ALL)
    avg = RunningAverage(schedule.mpa_burn_in) if toggles.mpa else None
    ubn_model = AveragedEvalModel(model.spec, avg) if (avg is not None and toggles.ubn) else None
    trace = TrainTrace()
    loss_sum, loss_n = 0.0, 0

    def eval_state(step: int) -> ModelState:
        if avg is not None and avg.count > 0:
            if ubn_model is not None:
                return ubn_model.state(step)
            stats = extract_state(model, step).bn_stats
            return ModelState(avg.params(), stats, step)
        return extract_state(model, step)

    for step in range(1, schedule.total_steps + 1):
        batch = next(data)
        mask = head_mask if step <= schedule.warmstart_steps else all_mask
        loss_sum += train_step(model, opt, batch.x, batch.y, mask)
        loss_n += 1
        if step >= schedule.mpa_burn_in and avg is not None:
            avg.update(extract_state(model, step))
            if ubn_model is not None:
                ubn_model.accumulate(batch.x)
                trace.ubn_updates += 1
        if on_step is not None:
            on_step(step, model, opt)
        if step % schedule.val_every == 0:
            trace.loss_curve.append((step, loss_sum / loss_n))
            loss_sum, loss_n = 0.0, 0
            if validate is not None:
                trace.val_curve.append((step, float(validate(step, eval_state(step)))))
    trace.steps_run = schedule.total_steps
    trace.mpa_count = avg.count if avg is not None else 0
    trace.averaged = trace.mpa_count > 0
    return eval_state(schedule.total_steps), trace


def select_phi(val_curve: Sequence[tuple[int, float]]) -> int:
    """Step with the highest validation accuracy; ties go to the earliest step."""
    if not val_curve:
        raise ConfigError("no validation accuracy was recorded; schedule too short for val_every")
    best_step, best = val_curve[0]
    for step, acc in val_curve[1:]:
        if acc > best:
            best_step, best = step, acc
    return best_step


@dataclass
class RunRecord:
    label: str
    toggles: dict
    schedule: dict
    seed: int
    held_out_domain: str
    source_domains: list[str]
    val_curve: list
    loss_curve: list
    phi: int | None
    pass_steps: list[int]
    pool_sizes: dict[str, int]
    final_accuracy: float
    l2_from_init: float
    mpa_count: int
    init_digest: str
    checkpoint_digest: str
    generator_spec: dict | None
    config_digest: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def default_spec(ds: MultiDomainDataset, hidden_dims=(32, 32), use_batchnorm: bool = True) -> ModelSpec:
    return ModelSpec(ds.input_dim, tuple(hidden_dims), ds.num_classes, use_batchnorm)


_PRETRAIN_CACHE: dict[tuple, ModelState] = {}


def pretrained_backbone(ds: MultiDomainDataset, spec: ModelSpec, cfg: PretrainConfig, seed: int) -> ModelState:
    """Backbone pretrained on pooled features of every domain (cached per process)."""
    key = (hashlib.sha256(dataset_bytes(ds)).hexdigest(), spec.digest(), cfg, seed)
    if key not in _PRETRAIN_CACHE:
        x, _ = ds.pooled(ds.domain_names)
        _PRETRAIN_CACHE[key] = pretrain_backbone(x, spec, cfg, seed)
    return _PRETRAIN_CACHE[key].copy()


def initial_state(ds, spec: ModelSpec, toggles: ComponentToggles, seed: int,
                  backbone: ModelState | None = None, pretrain_cfg: PretrainConfig | None = None) -> ModelState:
    state = extract_state(MLP(spec, rng_stream(seed, "init")))
    if toggles.strong_init:
        if backbone is None:
            backbone = pretrained_backbone(ds, spec, pretrain_cfg or PretrainConfig(), seed)
        state = apply_backbone(state, backbone)
    return state


def make_batches(ds, sources, schedule: TrainSchedule, toggles: ComponentToggles, seed: int, pools):
    if toggles.sampler == "resampled":
        return resampled_batches(ds, sources, schedule.per_domain_batch * len(sources), seed, pools)
    return balanced_batches(ds, sources, schedule.per_domain_batch, seed, pools)


def _train_pass(ds, spec, init: ModelState, sources, pools, schedule, toggles, seed, tag,
                validate: Validator | None):
    model = MLP(spec, 0)
    inject_state(model, init)
    data = make_batches(ds, sources, schedule, toggles, derive_seed(seed, "sample", tag), pools)
    return train_ermpp(model, data, schedule, toggles, seed, validate=validate)


def two_pass_protocol(
    ds: MultiDomainDataset,
    held_out: str,
    schedule: TrainSchedule,
    toggles: ComponentToggles,
    seed: int,
    *,
    spec: ModelSpec | None = None,
    backbone: ModelState | None = None,
    pretrain_cfg: PretrainConfig | None = None,
    validation_fn: Validator | None = None,
    label: str = "",
    config_digest: str = "",
    checkpoint_dir: str | None = None,
) -> RunRecord:
    """Train with the toggled components and evaluate on ``held_out``.

    With ``es`` the first pass trains on the train split, picks the step
    count ``phi`` from validation accuracy, and a second pass retrains from
    the same initialization for exactly ``phi`` steps (on train + val with
    ``fd``). Without ``es`` a single pass runs the full budget, on train + val
    with ``fd`` and on the train split otherwise. With ``checkpoint_dir`` the
    deployment state is also written there.
    """
    started = time.perf_counter()
    spec = spec or default_spec(ds)
    resolved = schedule.resolve(toggles)
    sources = [d for d in ds.domain_names if d != held_out]
    if held_out not in ds.domains:
        raise ConfigError(f"unknown held-out domain {held_out!r}")
    splits = split(ds, resolved.split_fraction, derive_seed(seed, "split"))
    train_pools = {d: splits.train[d] for d in sources}
    full_pools = {d: splits.full()[d] for d in sources}
    init = initial_state(ds, spec, toggles, seed, backbone, pretrain_cfg)
    val_x, val_y = ds.pooled(sources, splits.val)

    def default_validate(step: int, state: ModelState) -> float:
        return accuracy(spec, state, val_x, val_y)

    validate = validation_fn or default_validate
    phi = None
    pass_steps = []
    if toggles.es:
        _, trace1 = _train_pass(ds, spec, init, sources, train_pools, resolved, toggles, seed,
                                f"pass1:{held_out}", validate)
        phi = select_phi(trace1.val_curve)
        pass_steps.append(trace1.steps_run)
        pools = full_pools if toggles.fd else train_pools
        final, trace2 = _train_pass(ds, spec, init, sources, pools, replace(resolved, total_steps=phi, early_stop_step=phi),
                                    toggles, seed, f"pass2:{held_out}", None)
        pass_steps.append(trace2.steps_run)
        val_curve, loss_curve, mpa_count = trace1.val_curve, trace1.loss_curve + trace2.loss_curve, trace2.mpa_count
    else:
        pools = full_pools if toggles.fd else train_pools
        final, trace = _train_pass(ds, spec, init, sources, pools, resolved, toggles, seed,
                                   f"pass1:{held_out}", None if toggles.fd else validate)
        pass_steps.append(trace.steps_run)
        val_curve, loss_curve, mpa_count = trace.val_curve, trace.loss_curve, trace.mpa_count
    hx, hy = ds.pooled([held_out])
    averaged = mpa_count > 0
    if checkpoint_dir is not None:
        save_checkpoint(final, checkpoint_path(checkpoint_dir, label, held_out, seed), averaged)
    return RunRecord(
        label=label,
        toggles=toggles.to_dict(),
        schedule=resolved.to_dict(),
        seed=seed,
        held_out_domain=held_out,
        source_domains=sources,
        val_curve=[list(p) for p in val_curve],
        loss_curve=[list(p) for p in loss_curve],
        phi=phi,
        pass_steps=pass_steps,
        pool_sizes={d: int(len(pools[d])) for d in sources},
        final_accuracy=accuracy(spec, final, hx, hy),
        l2_from_init=l2_distance_from_init(final, init),
        mpa_count=mpa_count,
        init_digest=state_digest(init),
        checkpoint_digest=state_digest(final, averaged=averaged),
        generator_spec=ds.generator_spec.to_dict() if ds.generator_spec else None,
        config_digest=config_digest,
        wall_clock=time.perf_counter() - started,
    )


run_protocol = two_pass_protocol


def smpa_protocol(
    ds: MultiDomainDataset,
    held_out: str,
    schedule: TrainSchedule,
    toggles: ComponentToggles,
    seed: int,
    smpa_cfg: SMPAConfig,
    *,
    spec: ModelSpec | None = None,
    backbone: ModelState | None = None,
    pretrain_cfg: PretrainConfig | None = None,
    label: str = "",
    config_digest: str = "",
    checkpoint_dir: str | None = None,
) -> RunRecord:
    """Train a generalist for the resolved budget, then merge per-domain specialists.

    The generalist pass uses the toggles (``es`` aside, it is a single pass);
    specialists fine-tune on each source domain and the merge gets its BN
    statistics recomputed.
    """
    started = time.perf_counter()
    spec = spec or default_spec(ds)
    resolved = schedule.resolve(toggles)
    if held_out not in ds.domains:
        raise ConfigError(f"unknown held-out domain {held_out!r}")
    sources = [d for d in ds.domain_names if d != held_out]
    splits = split(ds, resolved.split_fraction, derive_seed(seed, "split"))
    pools = {d: (splits.full() if toggles.fd else splits.train)[d] for d in sources}
    init = initial_state(ds, spec, toggles, seed, backbone, pretrain_cfg)
    generalist, trace = _train_pass(ds, spec, init, sources, pools, resolved, toggles, seed,
                                    f"generalist:{held_out}", None)
    cfg = replace(smpa_cfg, seed=derive_seed(seed, "smpa", held_out), bn_frozen=not toggles.ubn)
    final = smpa(generalist, ds, sources, spec, cfg, pools)
    if checkpoint_dir is not None:
        save_checkpoint(final, checkpoint_path(checkpoint_dir, label, held_out, seed), True)
    hx, hy = ds.pooled([held_out])
    return RunRecord(
        label=label,
        toggles=toggles.to_dict(),
        schedule=dict(resolved.to_dict(), smpa=asdict(smpa_cfg)),
        seed=seed,
        held_out_domain=held_out,
        source_domains=sources,
        val_curve=[],
        loss_curve=[list(p) for p in trace.loss_curve],
        phi=None,
        pass_steps=[trace.steps_run, smpa_cfg.specialist_steps],
        pool_sizes={d: int(len(pools[d])) for d in sources},
        final_accuracy=accuracy(spec, final, hx, hy),
        l2_from_init=l2_distance_from_init(final, init),
        mpa_count=len(sources),
        init_digest=state_digest(init),
        checkpoint_digest=state_digest(final, averaged=True),
        generator_spec=ds.generator_spec.to_dict() if ds.generator_spec else None,
        config_digest=config_digest,
        wall_clock=time.perf_counter() - started,
    )


def checkpoint_path(directory, label: str, held_out: str, seed: int) -> str:
    stem = "".join(c if c.isalnum() or c in "-_" else "_" for c in (label or "run"))
    return str(Path(directory) / f"{stem}_{held_out}_s{seed}.ckpt")


def stderr(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); NaN for fewer than two values."""
    vals = np.asarray(values, dtype=float)
    if len(vals) < 2:
        return float("nan")
    return float(vals.std(ddof=1) / math.sqrt(len(vals)))


@dataclass
class EvalReport:
    label: str
    toggles: dict
    domains: list[str]
    seeds: list[int]
    accuracies: dict[str, dict[int, float]]
    runs: list[RunRecord] = field(default_factory=list, compare=False)

    def domain_mean(self, domain: str) -> float:
        return float(np.mean([self.accuracies[domain][s] for s in self.seeds]))

    def domain_stderr(self, domain: str) -> float:
        return stderr([self.accuracies[domain][s] for s in self.seeds])

    @property
    def mean(self) -> float:
        """Average over held-out domains of the per-domain seed means."""
        return float(np.mean([self.domain_mean(d) for d in self.domains]))

    def seed_averages(self) -> list[float]:
        return [float(np.mean([self.accuracies[d][s] for d in self.domains])) for s in self.seeds]

    @property
    def mean_stderr(self) -> float:
        return stderr(self.seed_averages())


def _run_job(args) -> RunRecord:
    ds, held_out, schedule, toggles, seed, kwargs = args
    kwargs = dict(kwargs)
    smpa_cfg = kwargs.pop("smpa_cfg", None)
    if smpa_cfg is not None:
        return smpa_protocol(ds, held_out, schedule, toggles, seed, smpa_cfg, **kwargs)
    return two_pass_protocol(ds, held_out, schedule, toggles, seed, **kwargs)


def _execute(jobs: list, workers: int) -> list[RunRecord]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def leave_one_domain_out(
    ds: MultiDomainDataset,
    schedule: TrainSchedule,
    toggles: ComponentToggles,
    seeds: Sequence[int],
    *,
    held_out: Sequence[str] | None = None,
    workers: int = 1,
    label: str = "",
    **kwargs,
) -> EvalReport:
    """Hold out each domain in turn (or those in ``held_out``) for every seed."""
    if len(ds.domains) < 2:
        raise ConfigError("leave-one-domain-out needs at least 2 domains")
    if not seeds:
        raise ConfigError("at least one seed is required")
    domains = list(held_out) if held_out is not None else ds.domain_names
    jobs = [(ds, d, schedule, toggles, s, dict(kwargs, label=label)) for d in domains for s in seeds]
    runs = _execute(jobs, workers)
    acc: dict[str, dict[int, float]] = {d: {} for d in domains}
    for r in runs:
        acc[r.held_out_domain][r.seed] = r.final_accuracy
    return EvalReport(label, toggles.to_dict(), domains, list(seeds), acc, runs)


def ablation_grid(
    ds: MultiDomainDataset,
    base_schedule: TrainSchedule,
    toggle_sets: Sequence[tuple[str, ComponentToggles]],
    seeds: Sequence[int],
    **kwargs,
) -> list[EvalReport]:
    return [
        leave_one_domain_out(ds, base_schedule, toggles, seeds, label=label, **kwargs)
        for label, toggles in toggle_sets
    ]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def reports_csv(reports: Sequence[EvalReport], config_digest: str = "") -> str:
    """One row per (report, held-out domain): seed accuracies, mean, stderr."""
    seeds = sorted({s for r in reports for s in r.seeds})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "held_out_domain", *[f"seed_{s}" for s in seeds], "mean", "stderr", "config_digest"])
    for r in reports:
        for d in r.domains:
            w.writerow([
                r.label, d,
                *[_fmt(r.accuracies[d][s]) if s in r.accuracies[d] else "" for s in seeds],
                _fmt(r.domain_mean(d)), _fmt(r.domain_stderr(d)), config_digest,
            ])
    return buf.getvalue()


def _pct(x: float) -> str:
    return "nan" if math.isnan(x) else f"{100 * x:.1f}"


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in rows]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines)


def reports_markdown(reports: Sequence[EvalReport], header: str = "") -> str:
    """Comparative table: one row per report, held-out domains as columns + Avg."""
    domains = list(dict.fromkeys(d for r in reports for d in r.domains))
    rows = [["label", "components", *domains, "Avg."]]
    for r in reports:
        comps = ComponentToggles(**r.toggles).marks()
        cells = []
        for d in domains:
            if d in r.domains:
                se = r.domain_stderr(d)
                cells.append(_pct(r.domain_mean(d)) + ("" if math.isnan(se) else f" ± {_pct(se)}"))
            else:
                cells.append("")
        rows.append([r.label, comps, *cells, _pct(r.mean)])
    body = _aligned(rows)
    return f"{header}\n\n{body}\n" if header else body + "\n"
