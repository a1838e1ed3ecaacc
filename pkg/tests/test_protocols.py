import dataclasses

import numpy as np
import pytest

from conftest import tiny_world
from fedex_sim.core import ProtocolError, UpdateRecord
from fedex_sim.harness import SimConfig
from fedex_sim.learning import LearningTask
from fedex_sim.protocols import (
    Experiment,
    trigger_check,
    update_correction,
)

TASK = LearningTask(kind="logistic", input_dim=6, num_classes=4)
RNG = np.random.default_rng(77)


def make_experiment(protocol, tier_names, clone=False, **cfg_kw):
    defaults = dict(
        protocol=protocol,
        n_devices=len(tier_names),
        participants=len(tier_names),
        local_iters=10,
        ceiling=10,
        eta=0.1,
        batch_size=16,
        budget_rounds=6,
        master_seed=5,
    )
    defaults.update(cfg_kw)
    cfg = SimConfig(**defaults).validate()
    profiles, shards, test_X, test_y, probe_X = tiny_world(
        len(tier_names), tier_names, TASK, clone_shards=clone
    )
    return Experiment(TASK, profiles, shards, test_X, test_y, probe_X, cfg)


# ---- correction and trigger --------------------------------------------------------


def test_update_correction_realigns_returning_participant():
    dim = 8
    w_broadcast = RNG.normal(size=dim)
    m_own = UpdateRecord(RNG.normal(size=dim), 1, 10)
    m_mean = UpdateRecord(RNG.normal(size=dim), 1, 10)
    local_after_round = w_broadcast - m_own.delta
    global_after_round = w_broadcast - m_mean.delta
    corrected = update_correction(local_after_round, m_own, m_mean)
    assert np.allclose(corrected, global_after_round, atol=1e-12)


def test_trigger_check_identical_models_and_strictness():
    probe = RNG.normal(size=(20, TASK.input_dim))
    w = RNG.normal(size=TASK.param_dim)
    fired, val = trigger_check(TASK, [w.copy(), w.copy()], w, probe, 0.7)
    assert fired and val == pytest.approx(1.0, abs=1e-9)
    # strict inequality: a threshold of 1.0 can never fire
    fired, val = trigger_check(TASK, [w.copy()], w, probe, 1.0)
    assert not fired
    with pytest.raises(ProtocolError):
        trigger_check(TASK, [], w, probe, 0.5)


def test_trigger_zero_model_scores_zero():
    probe = RNG.normal(size=(20, TASK.input_dim))
    zero = np.zeros(TASK.param_dim)
    trained = RNG.normal(size=TASK.param_dim)
    fired, val = trigger_check(TASK, [zero], trained, probe, 0.1)
    assert val == 0.0 and not fired


# ---- protocol equivalences -----------------------------------------------------------


def run_models_per_round(exp):
    models = []
    orig = exp._finish_round

    def capture(*a, **kw):
        rec = orig(*a, **kw)
        models.append(exp.g.model.copy())
        return rec

    exp._finish_round = capture
    exp.run()
    return models


def test_overlap_equals_classical_on_homogeneous_clones():
    """With identical devices, identical shards, and full-batch gradients the
    overlapping protocol follows the plain synchronized trajectory."""
    tiers = ["tx2"] * 4
    kw = dict(batch_size=10_000, eta=0.1, budget_rounds=6, delta_cka=0.0)
    base = run_models_per_round(make_experiment("fedavg", tiers, clone=True, **kw))
    over = run_models_per_round(make_experiment("dgaplus", tiers, clone=True, **kw))
    fede = run_models_per_round(make_experiment("fedex", tiers, clone=True, **kw))
    assert len(base) == len(over) == len(fede) == 6
    for r, (a, b, c) in enumerate(zip(base, over, fede), 1):
        assert np.abs(a - b).max() < 1e-9, f"round {r}"
        assert np.abs(a - c).max() < 1e-9, f"round {r}"


def test_overlap_saves_virtual_time_on_homogeneous_clones():
    tiers = ["tx2"] * 4
    kw = dict(batch_size=10_000, eta=0.1, budget_rounds=6, delta_cka=0.0)
    t_base = make_experiment("fedavg", tiers, clone=True, **kw)
    t_over = make_experiment("dgaplus", tiers, clone=True, **kw)
    t_base.run()
    t_over.run()
    assert t_over.g.virtual_time_s < t_base.g.virtual_time_s
    # steady state: 5 banked iterations cut each round to 5*1.35 + 6.40
    assert t_over.records[-1].round_latency_s == pytest.approx(13.15, abs=1e-9)
    assert t_base.records[-1].round_latency_s == pytest.approx(19.9, abs=1e-9)


def test_degenerate_threshold_reduces_to_classical_selection():
    """delta_cka=1.0 can never latch, so the adaptive protocol must replay the
    utility-selection baseline round for round (protocol label aside)."""
    tiers = ["xavier", "tx2", "xiaomi12s", "tx2"]
    kw = dict(batch_size=8, eta=0.05, budget_rounds=5, delta_cka=1.0,
              participants=2)
    a = make_experiment("fedex", tiers, **kw)
    b = make_experiment("oort", tiers, **kw)
    ra = a.run()
    rb = b.run()
    assert len(ra) == len(rb) == 5
    for x, y in zip(ra, rb):
        dx, dy = x.as_dict(), y.as_dict()
        dx.pop("protocol"), dy.pop("protocol")
        assert dx == dy


def test_delta_zero_latches_from_the_start():
    exp = make_experiment("fedex", ["tx2"] * 3, delta_cka=0.0, budget_rounds=2)
    assert exp.g.latched
    exp.run()
    assert all(r.trigger_latched for r in exp.records)
    assert exp.records[1].max_staleness > 0  # overlapping from round 1


def test_fedex_switches_paths_when_trigger_fires():
    exp = make_experiment(
        "fedex", ["tx2"] * 4, delta_cka=0.5, budget_rounds=8, eta=0.15,
        batch_size=10_000,
    )
    assert not exp.g.latched  # positive threshold: classical start
    recs = exp.run()
    latch = [r.trigger_latched for r in recs]
    assert latch == sorted(latch), "latch must be one-way"
    assert any(latch), "expected fleet agreement to fire the trigger"
    first = latch.index(True)
    # the latch is observed after the round runs, so rounds up to and
    # including `first` ran classically
    assert all(r.max_staleness == 0 for r in recs[: first + 1])
    assert recs[first + 1 :] and all(
        r.max_staleness > 0 for r in recs[first + 1 :]
    )


# ---- conservation via the trace hook ---------------------------------------------------


def test_global_model_telescopes_over_mean_updates():
    exp = make_experiment("fedex", ["xavier", "tx2", "xiaomi12s"],
                          delta_cka=0.0, budget_rounds=7, participants=2)
    w0 = exp.g.model.copy()
    means = []
    exp.trace = lambda ev, p: means.append(p["mean_delta"]) if ev == "aggregate" else None
    exp.run()
    replay = w0.copy()
    for m in means:
        replay = replay - m
    assert np.array_equal(replay, exp.g.model)


def _assert_correction_lands_on_global(exp):
    """Every correction must leave the device at the current global model
    minus exactly the deltas it still holds banked."""
    failures = []

    def check(ev, payload):
        if ev != "correction":
            return
        i = payload["device"]
        st = exp.states[i]
        banked = sum(u.delta for u in st.pending_updates) + (
            st.partial_delta if st.partial_delta is not None else 0.0
        )
        expect = exp.g.model - banked
        err = np.abs(payload["after"] - expect).max()
        if err > 1e-9:
            failures.append((payload["round"], i, err))

    exp.trace = check
    exp.run()
    assert not failures


def test_corrected_local_equals_global_minus_banked_work():
    """With everyone participating every round, a device's model right after
    its correction is the current global model minus exactly the deltas it
    still holds banked."""
    exp = make_experiment("dgaplus", ["xavier", "tx2", "xiaomi12s", "tx2"],
                          budget_rounds=8)
    _assert_correction_lands_on_global(exp)


def test_correction_catches_up_after_sitting_out():
    """Partial participation: a device returning after missed rounds is
    handed the sum of every mean update it skipped, so it still lands on the
    current global model minus its banked work."""
    exp = make_experiment("dgaplus", ["xavier", "tx2", "xiaomi12s", "tx2"],
                          participants=2, budget_rounds=12)
    _assert_correction_lands_on_global(exp)


def test_uploads_are_always_full_blocks():
    exp = make_experiment("dgaplus_oort", ["tx2", "xiaomi12s", "xavier"],
                          budget_rounds=8, ceiling=10)
    sizes = []
    exp.trace = lambda ev, p: sizes.append(p["update"].iterations) if ev == "upload" else None
    exp.run()
    assert sizes and all(s == exp.K for s in sizes)


def test_ceiling_above_block_size_keeps_invariants():
    """U > K: a fast device waiting on a slow straggler banks past one block.
    In the trio the tx2 paces every round at 19.9s, leaving the xiaomi enough
    window to pile up to the ceiling and hold a multi-block queue."""
    exp = make_experiment("dgaplus", ["xavier", "tx2", "xiaomi12s"],
                          ceiling=25, budget_rounds=10)
    recs = exp.run()
    assert all(r.max_staleness <= 25 for r in recs)
    assert any(r.max_staleness > 10 for r in recs)  # banked past one block
    fast = exp.states[2]
    assert fast.ahead_iterations == 25  # pinned at the ceiling in steady state
    assert len(fast.pending_updates) >= 2
    for st in exp.states:
        assert st.ahead_iterations <= 25
        assert st.partial_iters < exp.K


def test_nonparticipants_keep_banked_state():
    exp = make_experiment("dgaplus", ["tx2"] * 4, participants=2, budget_rounds=6)
    snapshots = []

    def watch(ev, p):
        if ev == "round":
            snapshots.append(
                [
                    (len(st.pending_updates), st.partial_iters, st.overlooked_rounds)
                    for st in exp.states
                ]
            )

    exp.trace = watch
    exp.run()
    assert len(snapshots) == 6
    for snap in snapshots:
        # exactly P devices were just marked as participants
        assert sum(1 for _, _, ov in snap if ov == 0) == 2
    for prev, cur in zip(snapshots, snapshots[1:]):
        for (pb, pi, pov), (cb, ci, cov) in zip(prev, cur):
            if cov > 0:  # sat this round out: banked work untouched
                assert (cb, ci) == (pb, pi)
                assert cov == pov + 1
    for st in exp.states:
        assert st.ahead_iterations <= exp.U


# ---- fedavg sanity ----------------------------------------------------------------------


def test_fedavg_global_is_mean_of_participant_locals():
    exp = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=1, batch_size=6)
    exp.run()
    locals_ = np.stack([st.local_model for st in exp.states])
    assert np.allclose(locals_.mean(axis=0), exp.g.model, atol=1e-9)


def test_budget_rounds_and_target_stop():
    exp = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=4)
    assert len(exp.run()) == 4
    exp2 = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=50,
                           target_accuracy=0.05)
    recs = exp2.run()
    assert len(recs) < 50 and recs[-1].accuracy >= 0.05


def test_budget_hours_stop():
    # tx2 classical rounds are 19.9s each; a 40s budget stops after round 3
    # (the first round whose end time crosses 40s)
    exp = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=50,
                          budget_hours=40.0 / 3600.0)
    recs = exp.run()
    assert len(recs) == 3


# ---- asynchronous protocol ----------------------------------------------------------------


def test_dga_homogeneous_steady_state():
    exp = make_experiment("dga", ["tx2"] * 4, budget_rounds=6)
    recs = exp.run()
    # every device ships on time: staleness is exactly ceil(6.40/1.35) = 5
    for r in recs:
        assert r.max_staleness == 5
        assert r.mean_staleness == pytest.approx(5.0, abs=1e-12)
        assert r.n_collisions == 0
        assert r.n_selected == 4
    # cadence: first aggregation at K*t_cp + t_comm, then every K*t_cp
    assert recs[0].round_latency_s == pytest.approx(19.9, abs=1e-9)
    for r in recs[1:]:
        assert r.round_latency_s == pytest.approx(13.5, abs=1e-9)


def test_dga_heterogeneous_staleness_grows_without_bound():
    exp = make_experiment("dga", ["xavier", "tx2", "xiaomi12s"], budget_rounds=30)
    recs = exp.run()
    stal = [r.max_staleness for r in recs]
    # the fast device drifts further ahead every round
    assert all(b > a for a, b in zip(stal, stal[1:]))
    assert stal[-1] > 100
    mem = [r.max_memory_bytes for r in recs]
    assert all(b >= a for a, b in zip(mem, mem[1:]))
    assert mem[-1] > mem[0]


def test_dga_closed_form_staleness_for_fast_device():
    """The slowest device paces aggregation: T_r = r*K*t_cp_slow + t_comm_slow.
    The fast device's staleness is its iterations started by T_r minus the
    r blocks already consumed."""
    from fedex_sim.timing import iterations_before

    exp = make_experiment("dga", ["xavier", "tx2", "xiaomi12s"], budget_rounds=12)
    recs = exp.run()
    for r, rec in enumerate(recs, 1):
        t_agg = r * 10 * 1.35 + 6.40
        expect = iterations_before(t_agg, 0.84) - r * 10
        assert rec.max_staleness == expect, f"round {r}"


def test_dga_collisions_when_upload_outlives_block():
    # xiaomi12s at K=9: 7.66s upload > 7.56s block time, uplink saturates
    exp = make_experiment("dga", ["xiaomi12s"] * 2, local_iters=9, budget_rounds=8)
    recs = exp.run()
    assert sum(r.n_collisions for r in recs) > 0
    # rounds stretch to the upload cadence once the queue builds
    assert recs[-1].round_latency_s == pytest.approx(7.66, abs=1e-9)


def test_dga_memory_overflow_flags_but_run_continues():
    exp = make_experiment("dga", ["xavier", "tx2", "xiaomi12s"], budget_rounds=25)
    # shrink one device's capacity far below its growing footprint
    tiny = dataclasses.replace(exp.profiles[2], mem_capacity=exp.profiles[2].model_bytes * 3)
    exp.profiles[2] = tiny
    recs = exp.run()
    assert len(recs) == 25  # never aborted
    assert exp.states[2].overflowed


# ---- bookkeeping across protocols ----------------------------------------------------------


@pytest.mark.parametrize(
    "protocol", ["fedavg", "oort", "dga", "dgaplus", "dgaplus_oort", "fedex"]
)
def test_round_records_well_formed(protocol):
    exp = make_experiment(protocol, ["xavier", "tx2", "xiaomi12s"],
                          budget_rounds=4, participants=2)
    recs = exp.run()
    assert [r.round for r in recs] == [1, 2, 3, 4]
    times = [r.virtual_time_s for r in recs]
    assert all(b > a for a, b in zip(times, times[1:]))
    for r in recs:
        assert r.protocol == protocol
        assert 0.0 <= r.mean_cka <= 1.0
        assert 0.0 <= r.accuracy <= 1.0
        assert r.round_latency_s > 0
        assert r.max_memory_bytes > 0
        assert isinstance(r.trigger_latched, bool)


def test_summary_reports_target_crossing():
    exp = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=30,
                          target_accuracy=0.05)
    exp.run()
    s = exp.summary()
    assert s["reached"] is True
    assert s["NR"] == len(exp.records)
    assert s["OL_s"] == pytest.approx(exp.records[-1].virtual_time_s)
    assert s["PRT_s"] == pytest.approx(s["OL_s"] / s["NR"])

    exp2 = make_experiment("fedavg", ["tx2"] * 3, budget_rounds=2,
                           target_accuracy=2.0)  # unreachable
    exp2.run()
    s2 = exp2.summary()
    assert s2["reached"] is False and s2["OL_s"] is None
    assert 0.0 <= s2["max_accuracy"] <= 1.0
