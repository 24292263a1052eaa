import math

import numpy as np
import pytest

import ermpp.pipeline as P
from ermpp.data import DomainData, MultiDomainDataset, balanced_batches, make_rotated_blobs
from ermpp.errors import ConfigError
from ermpp.nn import MLP, ModelSpec, extract_state
from ermpp.pretrain import PretrainConfig
from ermpp.pipeline import (
    ABLATION_ROWS,
    ERM,
    ERMPP,
    ComponentToggles,
    RunRecord,
    TrainSchedule,
    ablation_grid,
    leave_one_domain_out,
    reports_csv,
    reports_markdown,
    select_phi,
    train_ermpp,
    two_pass_protocol,
)

SMALL = ModelSpec(2, (6,), 3)
TINY_PRETRAIN = PretrainConfig(steps=20)


@pytest.fixture(scope="module")
def blobs():
    return make_rotated_blobs(4, 15.0, 3, 40, 0.5, seed=2)


def separable(n=60):
    r = np.random.default_rng(0)
    doms = {}
    for name in ("a", "b"):
        y = np.arange(n) % 2
        x = np.stack([np.where(y == 1, 3.0, -3.0), np.zeros(n)], 1) + 0.5 * r.normal(size=(n, 2))
        doms[name] = DomainData(x, y)
    return MultiDomainDataset(doms, 2)


def test_plain_erm_reaches_low_loss_on_separable_data():
    ds = separable()
    model = MLP(ModelSpec(2, (), 2), 0)
    sched = TrainSchedule(total_steps=2000, warmstart_steps=0, val_every=100, lr=0.01).resolve(ERM)
    _, trace = train_ermpp(model, balanced_batches(ds, ["a", "b"], 16, 0), sched, ERM)
    assert trace.loss_curve[-1][1] < 0.1


def test_warmstart_keeps_backbone_and_moments_at_init(blobs):
    model = MLP(SMALL, 1)
    init = extract_state(model)
    toggles = ComponentToggles(ws=True)
    sched = TrainSchedule(total_steps=510, warmstart_steps=500, val_every=100).resolve(toggles)
    seen = {}

    def on_step(step, m, opt):
        if step == 500:
            seen["params"] = {k: p.data.copy() for k, p in m.parameters().items()}
            seen["m"] = {k: opt.m[k].copy() for k in opt.m}
            seen["v"] = {k: opt.v[k].copy() for k in opt.v}

    train_ermpp(model, balanced_batches(blobs, ["d0", "d1"], 8, 0), sched, toggles, on_step=on_step)
    for k, v in init.params.items():
        if k.startswith("head."):
            assert seen["params"][k].tobytes() != v.tobytes()
        else:
            assert seen["params"][k].tobytes() == v.tobytes()
            assert not np.any(seen["m"][k]) and not np.any(seen["v"][k])
    # the backbone moves once the warmstart ends
    assert model.parameters()["block0.linear.weight"].data.tobytes() != init.params["block0.linear.weight"].tobytes()


def test_average_of_injected_iterates(blobs, monkeypatch):
    def fake_step(model, opt, x, y, mask):
        fake_step.n += 1
        for p in model.parameters().values():
            p.data = np.full_like(p.data, float(fake_step.n))
        return 0.0

    fake_step.n = 0
    monkeypatch.setattr(P, "train_step", fake_step)
    toggles = ComponentToggles(mpa=True, ubn=False)
    sched = TrainSchedule(total_steps=3, warmstart_steps=0, mpa_burn_in=1, val_every=1)
    state, trace = train_ermpp(MLP(SMALL, 0), balanced_batches(blobs, ["d0"], 4, 0), sched, toggles)
    assert trace.mpa_count == 3
    for v in state.params.values():
        assert np.all(v == 2.0)


def test_burn_in_violation_fails_before_training(blobs):
    bad = TrainSchedule(total_steps=700, warmstart_steps=500, mpa_burn_in=550)
    with pytest.raises(ConfigError):
        bad.resolve(ERMPP)
    calls = []
    with pytest.raises(ConfigError):
        train_ermpp(MLP(SMALL, 0), balanced_batches(blobs, ["d0"], 4, 0), bad, ERMPP,
                    on_step=lambda *a: calls.append(a))
    assert not calls


def test_default_burn_in_follows_warmstart():
    assert TrainSchedule().resolve(ComponentToggles(ws=True)).mpa_burn_in == 600
    assert TrainSchedule().resolve(ComponentToggles()).mpa_burn_in == 100


def test_long_training_scales_only_the_budget():
    base = TrainSchedule(total_steps=300)
    a = base.resolve(ComponentToggles(mpa=True, ws=True))
    b = base.resolve(ComponentToggles(mpa=True, ws=True, lt=True))
    assert b.total_steps == 1200
    assert {k: v for k, v in a.to_dict().items() if k != "total_steps"} == \
           {k: v for k, v in b.to_dict().items() if k != "total_steps"}


def test_select_phi_ties_go_to_earliest_step():
    assert select_phi([(100, 0.5), (200, 0.9), (300, 0.9)]) == 200
    assert select_phi([(100, 0.7), (200, 0.7)]) == 100
    with pytest.raises(ConfigError):
        select_phi([])


def test_two_pass_with_injected_peak(blobs):
    toggles = ComponentToggles(fd=True, es=True)
    sched = TrainSchedule(total_steps=2000, warmstart_steps=0, val_every=100, per_domain_batch=4)
    rec = two_pass_protocol(blobs, "d3", sched, toggles, 0, spec=SMALL,
                            validation_fn=lambda step, state: -abs(step - 1200))
    assert rec.phi == 1200
    assert rec.pass_steps == [2000, 1200]
    assert rec.pool_sizes == {d: 40 for d in ("d0", "d1", "d2")}


def test_two_pass_flat_curve_picks_first_evaluation(blobs):
    sched = TrainSchedule(total_steps=300, warmstart_steps=0, val_every=100, per_domain_batch=4)
    rec = two_pass_protocol(blobs, "d0", sched, ComponentToggles(es=True), 0, spec=SMALL,
                            validation_fn=lambda step, state: 0.5)
    assert rec.phi == 100 and rec.pass_steps == [300, 100]
    # without fd, pass 2 keeps to the train split
    assert rec.pool_sizes == {d: 32 for d in ("d1", "d2", "d3")}


def test_too_short_for_validation_is_config_error(blobs):
    sched = TrainSchedule(total_steps=50, warmstart_steps=0, val_every=100)
    with pytest.raises(ConfigError):
        two_pass_protocol(blobs, "d0", sched, ComponentToggles(es=True), 0, spec=SMALL)


def test_mpa_off_deploys_the_final_iterate(blobs):
    model = MLP(SMALL, 3)
    sched = TrainSchedule(total_steps=50, warmstart_steps=0, val_every=10).resolve(ERM)
    state, trace = train_ermpp(model, balanced_batches(blobs, ["d0"], 4, 0), sched, ERM)
    final = extract_state(model, 50)
    assert trace.mpa_count == 0
    assert all(state.params[k].tobytes() == v.tobytes() for k, v in final.params.items())
    assert all(state.bn_stats[k][1].tobytes() == v[1].tobytes() for k, v in final.bn_stats.items())


def test_frozen_bn_keeps_initial_stats(blobs):
    toggles = ComponentToggles(mpa=True, ubn=False)
    sched = TrainSchedule(total_steps=150, warmstart_steps=0, val_every=50).resolve(toggles)
    state, trace = train_ermpp(MLP(SMALL, 0), balanced_batches(blobs, ["d0", "d1"], 4, 0), sched, toggles)
    assert trace.mpa_count == 51 and trace.ubn_updates == 0
    for m, v in state.bn_stats.values():
        assert m.tobytes() == np.zeros_like(m).tobytes()
        assert v.tobytes() == np.ones_like(v).tobytes()


def test_run_records_are_deterministic_and_serializable(blobs):
    sched = TrainSchedule(total_steps=200, warmstart_steps=50, val_every=50, per_domain_batch=4)
    kw = dict(spec=SMALL, pretrain_cfg=TINY_PRETRAIN)
    a = two_pass_protocol(blobs, "d1", sched, ERMPP, 5, **kw)
    b = two_pass_protocol(blobs, "d1", sched, ERMPP, 5, **kw)
    assert a == b
    assert RunRecord.from_json(a.to_json()) == a
    assert a.checkpoint_digest != a.init_digest


def test_leave_one_domain_out_counts_and_stderr(blobs):
    sched = TrainSchedule(total_steps=60, warmstart_steps=0, val_every=20, per_domain_batch=4)
    rep = leave_one_domain_out(blobs, sched, ERM, [0, 1, 2], spec=SMALL)
    assert len(rep.runs) == 12
    assert rep.domains == ["d0", "d1", "d2", "d3"]
    for d in rep.domains:
        vals = [r.final_accuracy for r in rep.runs if r.held_out_domain == d]
        assert rep.domain_stderr(d) == pytest.approx(np.std(vals, ddof=1) / math.sqrt(3), abs=1e-15)
        assert rep.domain_mean(d) == pytest.approx(np.mean(vals), abs=1e-15)
    assert rep.mean == pytest.approx(np.mean([rep.domain_mean(d) for d in rep.domains]), abs=1e-15)
    header = reports_markdown([rep]).splitlines()[0]
    assert header.count("| d") == 4 and "Avg." in header
    assert len(reports_csv([rep]).splitlines()) == 5


def test_perfect_classifier_family():
    r = np.random.default_rng(0)
    doms = {}
    for i in range(3):
        y = np.arange(30) % 2
        doms[f"d{i}"] = DomainData(np.stack([np.where(y == 1, 5.0, -5.0), 0.01 * r.normal(size=30)], 1), y)
    ds = MultiDomainDataset(doms, 2)
    sched = TrainSchedule(total_steps=200, warmstart_steps=0, val_every=50, per_domain_batch=8, lr=0.01)
    rep = leave_one_domain_out(ds, sched, ERM, [0, 1], spec=ModelSpec(2, (4,), 2))
    assert all(r.final_accuracy == 1.0 for r in rep.runs)


def test_ablation_grid_shapes_and_duplicates(blobs):
    sched = TrainSchedule(total_steps=20, warmstart_steps=5, mpa_burn_in=105, val_every=5,
                          per_domain_batch=4, long_train_multiplier=2)
    rows = [(f"exp{n}", t) for n, t in ABLATION_ROWS.items()]
    kw = dict(spec=SMALL, pretrain_cfg=TINY_PRETRAIN, held_out=["d3"])
    reps = ablation_grid(blobs, sched, rows, [0], **kw)
    assert len(reps) == 9
    assert [r.label for r in reps] == [f"exp{n}" for n in range(1, 10)]
    dup = ablation_grid(blobs, sched, [("a", ERMPP), ("b", ERMPP)], [0], **kw)
    assert dup[0].accuracies == dup[1].accuracies
    assert [r.checkpoint_digest for r in dup[0].runs] == [r.checkpoint_digest for r in dup[1].runs]


def test_stderr_of_single_seed_is_nan():
    assert math.isnan(P.stderr([0.5]))
    assert P.stderr([1.0, 3.0]) == pytest.approx(1.0)


def test_unknown_held_out_domain(blobs):
    with pytest.raises(ConfigError):
        two_pass_protocol(blobs, "zz", TrainSchedule(total_steps=10), ERM, 0)
