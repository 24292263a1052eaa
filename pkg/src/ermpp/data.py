"""Synthetic multi-domain benchmarks, train/val splits and batch samplers.

Randomness is split into named streams derived from a master seed::

    rng_stream(seed, "split", "d0")  ->  default_rng(SeedSequence([seed, crc32("split"), crc32("d0")]))

so adding a consumer of one stream never perturbs another (changing the
sampler does not change the dataset).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
)


def rng_stream(seed: int, *tags) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words += [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))


def derive_seed(seed: int, *tags) -> int:
    return int(rng_stream(seed, *tags).integers(0, 2**31 - 1))


@dataclass(frozen=True)
class GeneratorSpec:
    family: str
    params: dict
    seed: int

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "seed": self.seed}


@dataclass
class DomainData:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MultiDomainDataset:
    domains: dict[str, DomainData]
    num_classes: int
    generator_spec: GeneratorSpec | None = None

    def __post_init__(self):
        for name, d in self.domains.items():
            if len(d) == 0:
                raise ContractError(f"domain {name!r} is empty")
            if d.labels.min() < 0 or d.labels.max() >= self.num_classes:
                raise ContractError(f"domain {name!r} has labels outside [0, {self.num_classes})")

    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    @property
    def input_dim(self) -> int:
        return next(iter(self.domains.values())).features.shape[1]

    def regenerate(self) -> "MultiDomainDataset":
        if self.generator_spec is None:
            raise ContractError("dataset has no generator spec")
        return generate(self.generator_spec)

    def pooled(self, names: Sequence[str], pools: dict[str, np.ndarray] | None = None):
        xs, ys = [], []
        for n in names:
            d = self.domains[n]
            idx = slice(None) if pools is None else pools[n]
            xs.append(d.features[idx])
            ys.append(d.labels[idx])
        return np.concatenate(xs), np.concatenate(ys)


def _rotation(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def _balanced_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes).astype(np.int64)


def class_means(num_classes: int, radius: float = 2.0) -> np.ndarray:
    """Class centres evenly spaced on a circle, class 0 on the positive x-axis."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # exact zeros keep the axis-aligned cases exact
    means[np.abs(means) < 1e-12] = 0.0
    return means


def make_rotated_blobs(
    num_domains: int = 5,
    rotation_step_deg: float = 15.0,
    num_classes: int = 3,
    n_per_domain: int = 200,
    noise_sigma: float = 0.5,
    seed: int = 0,
    radius: float = 2.0,
) -> MultiDomainDataset:
    """Gaussian class blobs in 2-D; domain ``d`` is rotated by ``d * step`` degrees."""
    if num_domains < 3:
        raise ContractError(f"rotated blobs need at least 3 domains, got {num_domains}")
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if noise_sigma <= 0:
        raise ContractError(f"noise_sigma must be positive, got {noise_sigma}")
    means = class_means(num_classes, radius)
    domains = {}
    for d in range(num_domains):
        rng = rng_stream(seed, "rotated_blobs", d)
        y = _balanced_labels(rng, n_per_domain, num_classes)
        x = means[y] + noise_sigma * rng.standard_normal((n_per_domain, 2))
        domains[f"d{d}"] = DomainData(x @ _rotation(d * rotation_step_deg).T, y)
    spec = GeneratorSpec(
        "rotated_blobs",
        dict(num_domains=num_domains, rotation_step_deg=rotation_step_deg, num_classes=num_classes,
             n_per_domain=n_per_domain, noise_sigma=noise_sigma, radius=radius),
        seed,
    )
    return MultiDomainDataset(domains, num_classes, spec)


def make_spurious_blobs(
    num_domains: int = 4,
    spurious_corr: Sequence[float] = (0.9, 0.8, 0.7, -0.9),
    num_classes: int = 2,
    n_per_domain: int = 200,
    core_sigma: float = 1.0,
    core_separation: float = 1.5,
    spurious_noise: float = 0.0,
    seed: int = 0,
) -> MultiDomainDataset:
    """Two features per sample: a noisy core signal and a spurious channel.

    In domain ``d`` the spurious channel encodes the true label with
    probability ``(1 + corr[d]) / 2`` and a different class otherwise.
    """
    corr = [float(c) for c in spurious_corr]
    if len(corr) != num_domains:
        raise ContractError(f"need one correlation per domain: {len(corr)} for {num_domains} domains")
    if any(not -1.0 <= c <= 1.0 for c in corr):
        raise ContractError(f"spurious correlations must lie in [-1, 1], got {corr}")
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if core_sigma <= 0 or spurious_noise < 0:
        raise ContractError("core_sigma must be positive and spurious_noise non-negative")
    levels = np.linspace(-1.0, 1.0, num_classes)
    domains = {}
    for d in range(num_domains):
        rng = rng_stream(seed, "spurious_blobs", d)
        y = _balanced_labels(rng, n_per_domain, num_classes)
        core = (y - (num_classes - 1) / 2) * core_separation + core_sigma * rng.standard_normal(n_per_domain)
        agree = rng.random(n_per_domain) < (1.0 + corr[d]) / 2.0
        shift = rng.integers(1, num_classes, n_per_domain)
        shown = np.where(agree, y, (y + shift) % num_classes)
        spur = levels[shown]
        if spurious_noise:
            spur = spur + spurious_noise * rng.standard_normal(n_per_domain)
        domains[f"d{d}"] = DomainData(np.stack([core, spur], axis=1), y)
    spec = GeneratorSpec(
        "spurious_blobs",
        dict(num_domains=num_domains, spurious_corr=corr, num_classes=num_classes,
             n_per_domain=n_per_domain, core_sigma=core_sigma, core_separation=core_separation,
             spurious_noise=spurious_noise),
        seed,
    )
    return MultiDomainDataset(domains, num_classes, spec)


GENERATORS = {"rotated_blobs": make_rotated_blobs, "spurious_blobs": make_spurious_blobs}


def generate(spec: GeneratorSpec) -> MultiDomainDataset:
    try:
        fn = GENERATORS[spec.family]
    except KeyError:
        raise ContractError(f"unknown dataset family {spec.family!r}") from None
    return fn(**spec.params, seed=spec.seed)


@dataclass
class SplitDataset:
    train: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    fraction: float

    def full(self) -> dict[str, np.ndarray]:
        return {k: np.sort(np.concatenate([self.train[k], self.val[k]])) for k in self.train}


def split(ds: MultiDomainDataset, fraction: float, seed: int) -> SplitDataset:
    """Per-domain shuffled split; ``round(fraction * N_d)`` samples go to validation."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"split fraction must lie in (0, 1), got {fraction}")
    train, val = {}, {}
    for name, d in ds.domains.items():
        n = len(d)
        n_val = int(np.floor(fraction * n + 0.5))
        if n_val == 0 or n_val == n:
            raise ContractError(f"fraction {fraction} leaves an empty side for domain {name!r} (N={n})")
        perm = rng_stream(seed, "split", name).permutation(n)
        val[name] = np.sort(perm[:n_val])
        train[name] = np.sort(perm[n_val:])
    return SplitDataset(train, val, fraction)


@dataclass
class DomainBatch:
    x: np.ndarray
    y: np.ndarray
    composition: dict[str, int]
    indices: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.y)


def _pools(ds, source_domains, pools) -> dict[str, np.ndarray]:
    if not source_domains:
        raise ContractError("no source domains given")
    out = {}
    for name in source_domains:
        idx = np.arange(len(ds.domains[name])) if pools is None else np.asarray(pools[name])
        if len(idx) == 0:
            raise ContractError(f"domain {name!r} has an empty sample pool")
        out[name] = idx
    return out


class _Cycler:
    """Endless stream over a pool: shuffled passes, reshuffled on exhaustion."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        parts = []
        while k > 0:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            n = min(k, len(self.order) - self.pos)
            parts.append(self.order[self.pos:self.pos + n])
            self.pos += n
            k -= n
        return np.concatenate(parts)


def balanced_batches(
    ds: MultiDomainDataset,
    source_domains: Sequence[str],
    per_domain_batch: int,
    seed: int,
    pools: dict[str, np.ndarray] | None = None,
) -> Iterator[DomainBatch]:
    """Endless batches with exactly ``per_domain_batch`` samples from each domain.

    Each domain cycles independently, so small domains are oversampled.
    Streams are keyed by the domain's position, not its name.
    """
    if per_domain_batch < 1:
        raise ContractError(f"per_domain_batch must be >= 1, got {per_domain_batch}")
    pools = _pools(ds, source_domains, pools)
    cyclers = {n: _Cycler(p, rng_stream(seed, "balanced", i)) for i, (n, p) in enumerate(pools.items())}
    while True:
        xs, ys, idx = [], [], {}
        for name, cyc in cyclers.items():
            take = cyc.take(per_domain_batch)
            d = ds.domains[name]
            xs.append(d.features[take])
            ys.append(d.labels[take])
            idx[name] = take
        yield DomainBatch(
            np.concatenate(xs), np.concatenate(ys), {n: per_domain_batch for n in cyclers}, idx
        )


def resampled_batches(
    ds: MultiDomainDataset,
    source_domains: Sequence[str],
    total_batch: int,
    seed: int,
    pools: dict[str, np.ndarray] | None = None,
) -> Iterator[DomainBatch]:
    """Endless batches drawn uniformly with replacement from the pooled sources."""
    if total_batch < 1:
        raise ContractError(f"total_batch must be >= 1, got {total_batch}")
    pools = _pools(ds, source_domains, pools)
    names = list(pools)
    owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(pools.values())])
    local = np.concatenate(list(pools.values()))
    x_all = np.concatenate([ds.domains[n].features[pools[n]] for n in names])
    y_all = np.concatenate([ds.domains[n].labels[pools[n]] for n in names])
    rng = rng_stream(seed, "resampled")
    while True:
        pick = np.sort(rng.integers(0, len(local), total_batch))
        counts = np.bincount(owner[pick], minlength=len(names))
        idx = {n: local[pick[owner[pick] == i]] for i, n in enumerate(names)}
        yield DomainBatch(
            x_all[pick], y_all[pick], {n: int(c) for n, c in zip(names, counts)}, idx
        )


# dataset export / import: same header discipline as model checkpoints

DS_MAGIC = b"ERMPPDS\x00"
DS_VERSION = 1
_DS_HEADER = struct.Struct("<8sHHI")


def dataset_bytes(ds: MultiDomainDataset) -> bytes:
    spec = json.dumps(ds.generator_spec.to_dict() if ds.generator_spec else None, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_DS_HEADER.pack(DS_MAGIC, DS_VERSION, 0, len(spec)))
    buf.write(spec)
    buf.write(struct.pack("<III", ds.num_classes, ds.input_dim, len(ds.domains)))
    for name, d in ds.domains.items():
        raw = name.encode()
        buf.write(struct.pack("<IQ", len(raw), len(d)) + raw)
        buf.write(np.ascontiguousarray(d.features, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(d.labels, dtype="<i8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: MultiDomainDataset, path) -> str:
    data = dataset_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> MultiDomainDataset:
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size + 4:
        raise CheckpointTruncatedError("dataset file shorter than its header")
    magic, version, _flags, spec_len = _DS_HEADER.unpack_from(data)
    if magic != DS_MAGIC:
        raise CheckpointFormatError(f"bad dataset magic {magic!r}")
    if version != DS_VERSION:
        raise CheckpointVersionError(f"dataset version {version}, expected {DS_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError("dataset CRC32 mismatch (truncated or corrupted)")
    pos = _DS_HEADER.size
    spec_raw = json.loads(body[pos:pos + spec_len])
    pos += spec_len
    num_classes, dim, n_domains = struct.unpack_from("<III", body, pos)
    pos += 12
    domains = {}
    for _ in range(n_domains):
        name_len, n = struct.unpack_from("<IQ", body, pos)
        pos += 12
        name = body[pos:pos + name_len].decode()
        pos += name_len
        feats = np.frombuffer(body, "<f8", n * dim, pos).reshape(n, dim).astype(np.float64)
        pos += 8 * n * dim
        labels = np.frombuffer(body, "<i8", n, pos).astype(np.int64)
        pos += 8 * n
        domains[name] = DomainData(feats, labels)
    spec = GeneratorSpec(spec_raw["family"], spec_raw["params"], spec_raw["seed"]) if spec_raw else None
    return MultiDomainDataset(domains, num_classes, spec)
