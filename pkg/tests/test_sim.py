import numpy as np
import pytest

from conftest import make_set, sliding_sets
from splatoff.culling import cull
from splatoff.ordering import finalization_schedule, order_views
from splatoff.scene import DEFAULT_LAYOUT, PARAMS_PER_GAUSSIAN, SceneSpec, generate_synthetic_scene
from splatoff.sim import (
    DEFAULT_COST_MODEL,
    CostModel,
    SimEvent,
    SimTrace,
    adam_trailing_time,
    metrics,
    simulate,
)
from splatoff.transfer import plan_batch


def build(sets, n):
    sched = finalization_schedule(sets, n)
    return plan_batch(sets, sched), sched


def hidden_comm_model():
    """Slow compute, fast link: communication should hide entirely."""
    return CostModel(
        h2d_bandwidth=1e9, d2h_bandwidth=1e9, transfer_latency=1e-6,
        alpha_fwd=1e-6, beta_fwd=0.0, gamma_fwd=1e-3,
        alpha_bwd=2e-6, beta_bwd=0.0, gamma_bwd=2e-3,
        alpha_adam=1e-9, gamma_adam=1e-5, sched_overhead=1e-3,
    )


def test_degenerate_costs_leave_only_compute():
    cm = CostModel(
        h2d_bandwidth=1e30, d2h_bandwidth=1e30, transfer_latency=0.0,
        alpha_adam=0.0, gamma_adam=0.0, sched_overhead=0.0,
    )
    rng = np.random.default_rng(1)
    n = 200
    sets = sliding_sets(rng, n, 4)
    plans, sched = build(sets, n)
    px = 100
    want = sum(cm.fwd_time(s.size, px) + cm.bwd_time(s.size, px) for s in sets)
    for mode in ("clm", "naive"):
        trace = simulate(plans, sched, cm, mode=mode, pixels=px)
        assert trace.makespan == pytest.approx(want, rel=1e-12)


def test_naive_single_microbatch_serial_decomposition():
    n = 120
    sets = [make_set(0, np.arange(30), n)]
    plans, sched = build(sets, n)
    cm = DEFAULT_COST_MODEL
    px = 64 * 48
    trace = simulate(plans, sched, cm, mode="naive", pixels=px)
    lay = DEFAULT_LAYOUT
    want = (cm.sched_overhead
            + cm.h2d_time(n * lay.offload_record_bytes)
            + cm.fwd_time(30, px) + cm.bwd_time(30, px)
            + cm.d2h_time(n * lay.grad_record_bytes)
            + cm.adam_time(n))
    assert trace.makespan == pytest.approx(want, rel=1e-12)
    # strictly serial: events in time order follow the five-stage chain
    kinds = [e.kind for e in sorted(trace.events, key=lambda e: e.start)]
    assert kinds == ["SCHED", "LD", "FWD", "BWD", "ST", "ADAM"]
    for prev, cur in zip(trace.events, trace.events[1:]):
        assert cur.start >= prev.end - 1e-15


def test_two_microbatches_hide_communication():
    # LD_2 and ST_1 both fit inside neighboring compute, so the makespan is
    # the serial compute chain plus one lead-in load and one drain store.
    n = 30
    sets = [make_set(0, np.arange(10), n), make_set(1, np.arange(5, 15), n)]
    plans, sched = build(sets, n)
    cm = hidden_comm_model()
    px = 10
    lay = DEFAULT_LAYOUT
    trace = simulate(plans, sched, cm, mode="clm", pixels=px)
    f = cm.fwd_time(10, px)
    b = cm.bwd_time(10, px)
    want = (cm.sched_overhead
            + cm.h2d_time(10 * lay.offload_record_bytes)  # LD_1
            + 2 * (f + b)
            + cm.d2h_time(10 * lay.grad_record_bytes)  # drain store of S_2
            + cm.adam_time(10))  # F_2 = S_2 finalizes last
    assert trace.makespan == pytest.approx(want, rel=1e-12)
    assert adam_trailing_time(trace) == pytest.approx(cm.adam_time(10), rel=1e-12)


def test_comm_stream_interleaves_one_load_one_store():
    rng = np.random.default_rng(17)
    n = 300
    b = 5
    sets = sliding_sets(rng, n, b)
    plans, sched = build(sets, n)
    trace = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=50)
    comm = sorted(trace.events_for("comm"), key=lambda e: e.start)
    tagged = [(e.kind, e.microbatch) for e in comm]
    assert tagged == [
        ("LD", 1), ("LD", 2), ("ST", 1), ("LD", 3), ("ST", 2),
        ("LD", 4), ("ST", 3), ("LD", 5), ("ST", 4), ("ST", 5),
    ]


def test_dependency_contract_holds():
    rng = np.random.default_rng(23)
    n = 250
    sets = sliding_sets(rng, n, 6)
    plans, sched = build(sets, n)
    trace = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=40)
    by = {(e.kind, e.microbatch): e for e in trace.events}
    for i in range(1, 7):
        assert by[("FWD", i)].start >= by[("LD", i)].end - 1e-15
        assert by[("BWD", i)].start >= by[("FWD", i)].end - 1e-15
        assert by[("ST", i)].start >= by[("BWD", i)].end - 1e-15
        if ("ADAM", i) in by:
            assert by[("ADAM", i)].start >= by[("ST", i)].end - 1e-15


def test_resource_lower_bound_many_seeds():
    rng = np.random.default_rng(31)
    cm = DEFAULT_COST_MODEL
    for trial in range(10):
        n = int(rng.integers(100, 800))
        b = int(rng.integers(1, 10))
        sets = sliding_sets(rng, n, b)
        plans, sched = build(sets, n)
        for mode in ("clm", "naive"):
            trace = simulate(plans, sched, cm, mode=mode, pixels=200)
            lb = cm.sched_overhead + max(
                trace.busy_time("compute") - cm.sched_overhead,
                trace.busy_time("comm"),
                trace.busy_time("host_adam"),
            )
            assert trace.makespan >= lb - 1e-12


def test_comm_busy_time_is_exact_byte_arithmetic():
    rng = np.random.default_rng(37)
    n = 400
    sets = sliding_sets(rng, n, 5)
    plans, sched = build(sets, n)
    cm = DEFAULT_COST_MODEL
    lay = DEFAULT_LAYOUT
    trace = simulate(plans, sched, cm, mode="clm", pixels=10)
    want = 0.0
    for i in range(1, 6):
        want += cm.h2d_time(plans[i - 1].load_set.size * lay.offload_record_bytes)
        want += cm.d2h_time(plans[i].grad_store_set.size * lay.grad_record_bytes)
    assert trace.busy_time("comm") == pytest.approx(want, rel=1e-12)


def test_work_conservation_between_modes():
    rng = np.random.default_rng(41)
    n = 350
    sets = sliding_sets(rng, n, 6)
    plans, sched = build(sets, n)
    cm = DEFAULT_COST_MODEL
    a = simulate(plans, sched, cm, mode="clm", pixels=99)
    b = simulate(plans, sched, cm, mode="naive", pixels=99)
    compute = lambda t: sum(e.end - e.start for e in t.events_for("compute")
                            if e.kind in ("FWD", "BWD"))
    assert compute(a) == pytest.approx(compute(b), rel=1e-12)


def test_clm_not_slower_than_naive():
    rng = np.random.default_rng(47)
    for trial in range(12):
        n = int(rng.integers(150, 900))
        sets = sliding_sets(rng, n, int(rng.integers(1, 9)))
        plans, sched = build(sets, n)
        clm = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=300)
        naive = simulate(plans, sched, DEFAULT_COST_MODEL, mode="naive", pixels=300)
        assert clm.makespan <= naive.makespan + 1e-12


def test_traces_are_deterministic():
    rng = np.random.default_rng(53)
    n = 300
    sets = sliding_sets(rng, n, 7)
    plans, sched = build(sets, n)
    a = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=123)
    b = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=123)
    assert [(e.resource, e.kind, e.microbatch, e.start, e.end) for e in a.events] \
        == [(e.resource, e.kind, e.microbatch, e.start, e.end) for e in b.events]


def test_simulate_validation():
    n = 40
    sets = [make_set(0, [1, 2], n)]
    plans, sched = build(sets, n)
    with pytest.raises(ValueError):
        simulate(plans, sched, DEFAULT_COST_MODEL, mode="eager")
    with pytest.raises(ValueError):
        simulate(plans[:1], sched, DEFAULT_COST_MODEL)
    two_sets = [make_set(0, [1], n), make_set(1, [2], n)]
    plans2, sched2 = build(two_sets, n)
    with pytest.raises(ValueError):
        simulate(plans2, sched, DEFAULT_COST_MODEL)  # schedule B mismatch


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(h2d_bandwidth=0.0)
    with pytest.raises(ValueError):
        CostModel(alpha_fwd=-1.0)
    cm = CostModel()
    assert cm.adam_time(10) == pytest.approx(cm.alpha_adam * 10 * PARAMS_PER_GAUSSIAN
                                             + cm.gamma_adam)


def test_metrics_basics():
    rng = np.random.default_rng(59)
    n = 200
    sets = sliding_sets(rng, n, 4)
    plans, sched = build(sets, n)
    trace = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=77)
    m = metrics(trace, window=trace.makespan / 20)
    assert m.makespan == pytest.approx(max(e.end for e in trace.events))
    assert m.throughput == pytest.approx(4 / m.makespan)
    assert np.all((m.idle_cdf_x >= 0) & (m.idle_cdf_x <= 1))
    assert np.all(np.diff(m.idle_cdf_x) >= 0)
    assert m.idle_cdf_y[-1] == pytest.approx(1.0)
    assert set(m.overlap) == {"compute+comm", "compute+host_adam", "comm+host_adam"}
    for v in m.overlap.values():
        assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        metrics(trace, window=0.0)
    with pytest.raises(ValueError):
        metrics(SimTrace(events=[], mode="clm", n_microbatches=0), window=1.0)


def test_metrics_fully_busy_compute_idles_at_zero():
    trace = SimTrace(
        events=[SimEvent("compute", "FWD", 1, 0.0, 10.0)],
        mode="clm", n_microbatches=1,
    )
    m = metrics(trace, window=2.5)
    assert np.allclose(m.idle_cdf_x, 0.0)


def test_adam_trailing_formula_on_hand_trace():
    events = [
        SimEvent("comm", "ST", 1, 0.0, 10.0),
        SimEvent("host_adam", "ADAM", 1, 4.0, 8.0),
    ]
    trace = SimTrace(events=events, mode="clm", n_microbatches=1)
    assert adam_trailing_time(trace) == 0.0  # all chunks beat the last store
    events.append(SimEvent("host_adam", "ADAM", 1, 10.0, 13.5))
    assert adam_trailing_time(trace) == pytest.approx(3.5)


def test_single_microbatch_trailing_is_full_chunk():
    n = 90
    sets = [make_set(0, np.arange(25), n)]
    plans, sched = build(sets, n)
    cm = DEFAULT_COST_MODEL
    trace = simulate(plans, sched, cm, mode="clm", pixels=30)
    assert adam_trailing_time(trace) == pytest.approx(cm.adam_time(25), rel=1e-12)


def test_gscount_order_trails_less_than_random():
    # Front-loading large working sets finalizes more Gaussians early, so the
    # optimizer has less left to do after the final store.
    wins = 0
    trials = 30
    for seed in range(trials):
        spec = SceneSpec(n_gaussians=3000, n_views=8, camera_path="grid-flyover",
                         box_max=(90.0, 90.0, 8.0), width=32, height=24)
        scene = generate_synthetic_scene(spec, seed=seed)
        sets = [cull(scene, v, 3.0) for v in scene.views]
        px = 32 * 24
        trail = {}
        for strategy in ("gscount", "random"):
            order = order_views(sets, strategy, scene.views, rng_seed=seed)
            ordered = [sets[i] for i in order]
            plans, sched = build(ordered, scene.n)
            trace = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=px)
            trail[strategy] = adam_trailing_time(trace)
        if trail["gscount"] <= trail["random"] + 1e-12:
            wins += 1
    assert wins >= 0.9 * trials


def test_empty_working_set_entry_still_scheduled():
    n = 50
    sets = [make_set(0, [], n), make_set(1, [3, 4], n)]
    plans, sched = build(sets, n)
    trace = simulate(plans, sched, DEFAULT_COST_MODEL, mode="clm", pixels=5)
    assert {(e.kind, e.microbatch) for e in trace.events_for("comm")} \
        == {("LD", 1), ("LD", 2), ("ST", 1), ("ST", 2)}
