import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ermpp.data import (
    DomainData,
    GeneratorSpec,
    MultiDomainDataset,
    balanced_batches,
    dataset_bytes,
    derive_seed,
    generate,
    load_dataset,
    make_rotated_blobs,
    make_spurious_blobs,
    resampled_batches,
    rng_stream,
    save_dataset,
    split,
)
from ermpp.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointVersionError,
    ContractError,
)


def toy(sizes):
    r = np.random.default_rng(0)
    return MultiDomainDataset(
        {f"d{i}": DomainData(r.normal(size=(n, 2)), r.integers(0, 2, n)) for i, n in enumerate(sizes)}, 2
    )


# generators

def test_zero_rotation_gives_identically_distributed_domains():
    n, sigma = 400, 0.5
    ds = make_rotated_blobs(4, 0.0, 3, n, sigma, seed=5)
    m0 = ds.domains["d0"].features.mean(axis=0)
    m2 = ds.domains["d2"].features.mean(axis=0)
    assert np.all(np.abs(m0 - m2) < 3 * sigma / math.sqrt(n))


def test_ninety_degree_rotation_moves_x_axis_classes_to_y_axis():
    ds = make_rotated_blobs(3, 90.0, 2, 50, 1e-9, seed=1)
    d1 = ds.domains["d1"]
    for c, sign in ((0, 1.0), (1, -1.0)):
        mean = d1.features[d1.labels == c].mean(axis=0)
        assert abs(mean[0]) < 1e-6
        assert abs(mean[1] - sign * 2.0) < 1e-6


@pytest.mark.parametrize("fn", [make_rotated_blobs, make_spurious_blobs])
def test_generators_are_deterministic(fn):
    a, b = fn(seed=11), fn(seed=11)
    for k in a.domains:
        assert a.domains[k].features.tobytes() == b.domains[k].features.tobytes()
        assert a.domains[k].labels.tobytes() == b.domains[k].labels.tobytes()
    c = fn(seed=12)
    assert a.domains["d0"].features.tobytes() != c.domains["d0"].features.tobytes()


def test_regenerate_from_spec_is_bit_identical():
    ds = make_spurious_blobs(seed=4)
    again = generate(ds.generator_spec)
    assert dataset_bytes(ds) == dataset_bytes(again)


def test_generator_contracts():
    with pytest.raises(ContractError):
        make_rotated_blobs(2)
    with pytest.raises(ContractError):
        make_rotated_blobs(num_classes=1)
    with pytest.raises(ContractError):
        make_rotated_blobs(noise_sigma=0.0)
    with pytest.raises(ContractError):
        make_spurious_blobs(2, (0.5, 1.5))
    with pytest.raises(ContractError):
        make_spurious_blobs(3, (0.5, 0.5))
    with pytest.raises(ContractError):
        generate(GeneratorSpec("nope", {}, 0))


def test_full_correlation_makes_spurious_channel_a_label_function():
    ds = make_spurious_blobs(2, (1.0, -1.0), num_classes=3, n_per_domain=300, seed=2)
    d0 = ds.domains["d0"]
    levels = np.linspace(-1, 1, 3)
    assert np.array_equal(d0.features[:, 1], levels[d0.labels])
    d1 = ds.domains["d1"]
    assert not np.any(d1.features[:, 1] == levels[d1.labels])


def test_zero_correlation_agreement_is_near_half():
    n = 2000
    ds = make_spurious_blobs(1, (0.0,), n_per_domain=n, seed=3)
    d = ds.domains["d0"]
    agree = np.mean(d.features[:, 1] == np.linspace(-1, 1, 2)[d.labels])
    assert abs(agree - 0.5) < 3 / math.sqrt(n)


def test_streams_differ_by_tag_and_are_reproducible():
    a = rng_stream(1, "x").random(4)
    assert np.array_equal(a, rng_stream(1, "x").random(4))
    assert not np.array_equal(a, rng_stream(1, "y").random(4))
    assert derive_seed(1, "x") == derive_seed(1, "x") != derive_seed(2, "x")


# splits

def test_split_sizes_for_one_fifth():
    sp = split(toy([100, 100]), 0.2, seed=0)
    for name in ("d0", "d1"):
        assert len(sp.train[name]) == 80 and len(sp.val[name]) == 20


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(20, 200), st.integers(0, 1000))
def test_split_is_a_partition(fraction, n, seed):
    sp = split(toy([n]), fraction, seed)
    tr, va = set(sp.train["d0"]), set(sp.val["d0"])
    assert not tr & va
    assert tr | va == set(range(n))
    assert len(va) == math.floor(fraction * n + 0.5)


def test_split_is_deterministic():
    ds = toy([50, 60])
    a, b = split(ds, 0.3, 9), split(ds, 0.3, 9)
    assert all(np.array_equal(a.val[k], b.val[k]) for k in a.val)


def test_split_rejects_empty_sides():
    with pytest.raises(ContractError):
        split(toy([3]), 0.1, 0)
    with pytest.raises(ContractError):
        split(toy([10]), 1.0, 0)


# samplers

def test_balanced_composition():
    it = balanced_batches(toy([10, 30, 7]), ["d0", "d1", "d2"], 4, seed=0)
    b = next(it)
    assert b.composition == {"d0": 4, "d1": 4, "d2": 4}
    assert b.size == 12 and b.x.shape == (12, 2)


def test_small_domain_cycles_twice_in_three_batches():
    it = balanced_batches(toy([5]), ["d0"], 4, seed=7)
    seen = np.concatenate([next(it).indices["d0"] for _ in range(3)])
    assert np.all(np.bincount(seen, minlength=5) >= 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 10_000))
def test_balanced_window_coverage(n, p, seed):
    """Windows starting at a pass boundary need ceil(N/p) batches; arbitrary
    windows are guaranteed full coverage after ceil((2N-1)/p) batches."""
    it = balanced_batches(toy([n]), ["d0"], p, seed)
    stream = np.concatenate([next(it).indices["d0"] for _ in range(6 * n + 10)])
    # pass boundaries of the underlying cycle are at multiples of n
    w = math.ceil(n / p)
    for start in range(0, len(stream) - w * p, n):
        first = start - start % p
        if first == start:
            assert set(stream[start:start + w * p]) == set(range(n))
        assert set(stream[start:start + w * p + p]) >= set(range(n))
    w2 = math.ceil((2 * n - 1) / p)
    for b in range(len(stream) // p - w2):
        assert set(stream[b * p:(b + w2) * p]) == set(range(n))


def test_balanced_streams_are_deterministic():
    ds = toy([9, 12])
    a = balanced_batches(ds, ["d0", "d1"], 5, seed=3)
    b = balanced_batches(ds, ["d0", "d1"], 5, seed=3)
    for _ in range(10):
        assert next(a).x.tobytes() == next(b).x.tobytes()


def test_balanced_rejects_bad_arguments():
    with pytest.raises(ContractError):
        next(balanced_batches(toy([5]), ["d0"], 0, 0))
    with pytest.raises(ContractError):
        next(balanced_batches(toy([5]), ["d0"], 2, 0, pools={"d0": np.array([], dtype=int)}))


def test_balanced_respects_pools():
    it = balanced_batches(toy([20]), ["d0"], 3, 0, pools={"d0": np.array([2, 5, 11])})
    seen = np.concatenate([next(it).indices["d0"] for _ in range(5)])
    assert set(seen) == {2, 5, 11}


def test_resampled_single_domain():
    it = resampled_batches(toy([40]), ["d0"], 16, 0)
    for _ in range(20):
        assert next(it).composition == {"d0": 16}


def test_resampled_mean_count_is_near_half():
    it = resampled_batches(toy([50, 50]), ["d0", "d1"], 32, seed=5)
    counts = [next(it).composition["d0"] for _ in range(10_000)]
    assert 15.5 <= np.mean(counts) <= 16.5
    assert len(set(counts)) > 1


def test_resampled_is_deterministic_and_counts_sum():
    ds = toy([10, 30])
    a = resampled_batches(ds, ["d0", "d1"], 8, 1)
    b = resampled_batches(ds, ["d0", "d1"], 8, 1)
    for _ in range(10):
        ba, bb = next(a), next(b)
        assert ba.x.tobytes() == bb.x.tobytes()
        assert sum(ba.composition.values()) == 8


def test_resampled_rejects_zero_batch():
    with pytest.raises(ContractError):
        next(resampled_batches(toy([5]), ["d0"], 0, 0))


# export / import

def test_dataset_round_trip(tmp_path):
    ds = make_rotated_blobs(seed=8)
    save_dataset(ds, tmp_path / "ds.bin")
    back = load_dataset(tmp_path / "ds.bin")
    assert dataset_bytes(back) == dataset_bytes(ds)
    assert back.generator_spec == ds.generator_spec


def test_dataset_file_errors(tmp_path):
    ds = make_rotated_blobs(n_per_domain=10)
    raw = bytearray(dataset_bytes(ds))
    p = tmp_path / "x.bin"
    p.write_bytes(raw[:-10])
    with pytest.raises(CheckpointChecksumError):
        load_dataset(p)
    bad = bytearray(raw)
    bad[0:1] = b"X"
    p.write_bytes(bad)
    with pytest.raises(CheckpointFormatError):
        load_dataset(p)
    bad = bytearray(raw)
    bad[8] = 9
    p.write_bytes(bad)
    with pytest.raises(CheckpointVersionError):
        load_dataset(p)
