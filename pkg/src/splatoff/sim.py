"""Event-driven simulator for the offloaded training pipeline.

Three serial resources: the compute stream (FWD/BWD per microbatch, plus the
per-batch scheduling pass), the communication stream (LD/ST transfers), and
the host optimizer thread (ADAM chunks). In the pipelined mode the comm
stream runs the fixed interleaving LD_1, LD_2, ST_1, LD_3, ST_2, ..., ST_B --
the double-buffer discipline -- while ADAM chunks fire as soon as their
F-set's gradients land on the host. The naive mode serializes everything:
load all, render, store all, full Adam, repeat.

Costs come from an affine model; coefficients are plain configuration with
frozen defaults, and can be fitted to measured wall-clock with
calibrate_cost_model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ordering import FinalizationSchedule
from .scene import AttributeLayout, DEFAULT_LAYOUT, PARAMS_PER_GAUSSIAN
from .transfer import TransferPlan

RESOURCES = ("compute", "comm", "host_adam")
KINDS = ("FWD", "BWD", "LD", "ST", "ADAM", "SCHED")


@dataclass
class CostModel:
    """Affine costs: transfers by bytes, compute by working set and pixels."""

    h2d_bandwidth: float = 24e9  # bytes/s
    d2h_bandwidth: float = 24e9
    transfer_latency: float = 8e-6  # per operation
    alpha_fwd: float = 4e-9  # s per working-set Gaussian
    beta_fwd: float = 1.5e-9  # s per pixel
    gamma_fwd: float = 3e-4
    alpha_bwd: float = 8e-9
    beta_bwd: float = 3e-9
    gamma_bwd: float = 5e-4
    alpha_adam: float = 2.5e-10  # s per updated parameter float
    gamma_adam: float = 2e-5
    sched_overhead: float = 1.5e-3  # culling + ordering, once per batch

    def __post_init__(self):
        if self.h2d_bandwidth <= 0 or self.d2h_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")
        for name in ("transfer_latency", "alpha_fwd", "beta_fwd", "gamma_fwd",
                     "alpha_bwd", "beta_bwd", "gamma_bwd", "alpha_adam",
                     "gamma_adam", "sched_overhead"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def fwd_time(self, set_size: int, pixels: int) -> float:
        return self.alpha_fwd * set_size + self.beta_fwd * pixels + self.gamma_fwd

    def bwd_time(self, set_size: int, pixels: int) -> float:
        return self.alpha_bwd * set_size + self.beta_bwd * pixels + self.gamma_bwd

    def adam_time(self, count: int) -> float:
        return self.alpha_adam * count * PARAMS_PER_GAUSSIAN + self.gamma_adam

    def h2d_time(self, nbytes: int) -> float:
        return nbytes / self.h2d_bandwidth + self.transfer_latency

    def d2h_time(self, nbytes: int) -> float:
        return nbytes / self.d2h_bandwidth + self.transfer_latency


DEFAULT_COST_MODEL = CostModel()


@dataclass
class SimEvent:
    resource: str
    kind: str
    microbatch: int  # 0 for batch-level work (SCHED)
    start: float
    end: float


@dataclass
class SimTrace:
    events: list[SimEvent]
    mode: str
    n_microbatches: int

    def events_for(self, resource: str) -> list[SimEvent]:
        return [e for e in self.events if e.resource == resource]

    def busy_time(self, resource: str) -> float:
        return sum(e.end - e.start for e in self.events_for(resource))

    @property
    def makespan(self) -> float:
        return max(e.end for e in self.events)


@dataclass
class SimMetrics:
    makespan: float
    throughput: float  # images per second
    idle_cdf_x: np.ndarray  # sorted compute idle fractions per window
    idle_cdf_y: np.ndarray
    overlap: dict  # (res_a, res_b) -> overlapped busy / union busy


@dataclass
class _Op:
    resource: str
    kind: str
    microbatch: int
    duration: float
    deps: list[int] = field(default_factory=list)


def _check_plans(plans: list[TransferPlan], schedule: FinalizationSchedule) -> int:
    """Structural validation; returns B."""
    if len(plans) < 2:
        raise ValueError("plan list must contain at least one microbatch plus the drain")
    b = len(plans) - 1
    if schedule.n_microbatches != b:
        raise ValueError("schedule does not match the plan count")
    for j, p in enumerate(plans):
        if p.microbatch != j + 1:
            raise ValueError("plans must be numbered 1..B+1 in order")
    first, drain = plans[0], plans[-1]
    if first.cache_copy_set.size or first.grad_store_set.size or first.grad_carry_set.size:
        raise ValueError("first microbatch cannot cache or store: nothing precedes it")
    if drain.load_set.size or drain.cache_copy_set.size or drain.adam_set.size:
        raise ValueError("drain entry may only store residual gradients")
    for i in range(1, b + 1):
        if not np.array_equal(plans[i - 1].adam_set, schedule.f_sets[i]):
            raise ValueError("plan adam sets disagree with the finalization schedule")
    return b


def simulate(
    plans: list[TransferPlan],
    schedule: FinalizationSchedule,
    cm: CostModel,
    mode: str = "clm",
    pixels: int = 0,
    layout: AttributeLayout = DEFAULT_LAYOUT,
) -> SimTrace:
    """Schedule one batch and return the event trace.

    Dependency contract: FWD_i needs LD_i, BWD_i needs FWD_i, ST_i needs
    BWD_i, the ADAM chunk for F_i needs ST_i. The comm stream is FIFO in the
    1F1B order; compute is FIFO in microbatch order; host Adam runs chunks in
    F-index order. pixels is the per-view rendered pixel count feeding the
    compute cost terms.
    """
    if mode not in ("clm", "naive"):
        raise ValueError(f"unknown mode {mode!r}")
    b = _check_plans(plans, schedule)
    n = schedule.n_total

    # Working-set sizes: arrivals of entry i rebuild S_i exactly.
    sizes = [plans[i - 1].load_set.size + plans[i - 1].cache_copy_set.size
             for i in range(1, b + 1)]

    ops: list[_Op] = []

    def add(resource, kind, mb, dur, deps=()):
        ops.append(_Op(resource, kind, mb, dur, list(deps)))
        return len(ops) - 1

    sched_id = add("compute", "SCHED", 0, cm.sched_overhead)

    if mode == "clm":
        ld_bytes = [plans[i - 1].load_set.size * layout.offload_record_bytes for i in range(1, b + 1)]
        st_bytes = [plans[i].grad_store_set.size * layout.grad_record_bytes for i in range(1, b + 1)]

        fwd_ids, bwd_ids, ld_ids, st_ids = {}, {}, {}, {}
        # compute queue: FWD/BWD per microbatch; deps on LD filled in below
        for i in range(1, b + 1):
            fwd_ids[i] = add("compute", "FWD", i, cm.fwd_time(sizes[i - 1], pixels))
            bwd_ids[i] = add("compute", "BWD", i, cm.bwd_time(sizes[i - 1], pixels), [])

        # comm queue in 1F1B order: LD_1, LD_2, ST_1, LD_3, ST_2, ..., ST_B
        comm_seq = []
        next_ld, next_st = 1, 1
        while next_ld <= min(2, b):
            comm_seq.append(("LD", next_ld))
            next_ld += 1
        while next_st <= b:
            comm_seq.append(("ST", next_st))
            next_st += 1
            if next_ld <= b:
                comm_seq.append(("LD", next_ld))
                next_ld += 1
        for kind, i in comm_seq:
            if kind == "LD":
                ld_ids[i] = add("comm", "LD", i, cm.h2d_time(ld_bytes[i - 1]), [sched_id])
            else:
                st_ids[i] = add("comm", "ST", i, cm.d2h_time(st_bytes[i - 1]), [])

        for i in range(1, b + 1):
            ops[fwd_ids[i]].deps.append(ld_ids[i])
            ops[bwd_ids[i]].deps.append(fwd_ids[i])
            ops[st_ids[i]].deps.append(bwd_ids[i])

        # host Adam: one chunk per non-empty F_i, signaled by ST_i completion
        for i in range(1, b + 1):
            f = schedule.f_sets[i]
            if f.size:
                add("host_adam", "ADAM", i, cm.adam_time(f.size), [st_ids[i]])
    else:
        # naive offloading: full round trip and full Adam, strictly serial
        ld_nbytes = n * layout.offload_record_bytes
        st_nbytes = n * layout.grad_record_bytes
        prev = sched_id
        for i in range(1, b + 1):
            ld = add("comm", "LD", i, cm.h2d_time(ld_nbytes), [prev])
            fwd = add("compute", "FWD", i, cm.fwd_time(sizes[i - 1], pixels), [ld])
            bwd = add("compute", "BWD", i, cm.bwd_time(sizes[i - 1], pixels), [fwd])
            st = add("comm", "ST", i, cm.d2h_time(st_nbytes), [bwd])
            prev = add("host_adam", "ADAM", i, cm.adam_time(n), [st])

    # FIFO list scheduling: each resource executes its ops in insertion order,
    # starting an op once the resource is free and its dependencies are done.
    order = {res: [i for i, op in enumerate(ops) if op.resource == res] for res in RESOURCES}
    head = {res: 0 for res in RESOURCES}
    clock = {res: 0.0 for res in RESOURCES}
    start = [0.0] * len(ops)
    end = [None] * len(ops)

    remaining = len(ops)
    while remaining:
        progressed = False
        for res in RESOURCES:
            while head[res] < len(order[res]):
                op_id = order[res][head[res]]
                op = ops[op_id]
                if any(end[d] is None for d in op.deps):
                    break
                t0 = max([clock[res]] + [end[d] for d in op.deps])
                start[op_id] = t0
                end[op_id] = t0 + op.duration
                clock[res] = end[op_id]
                head[res] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ValueError("cyclic plan dependencies")  # unreachable for valid inputs

    events = [SimEvent(op.resource, op.kind, op.microbatch, start[i], end[i])
              for i, op in enumerate(ops)]
    events.sort(key=lambda e: (e.start, RESOURCES.index(e.resource), e.microbatch))
    return SimTrace(events=events, mode=mode, n_microbatches=b)


def _intervals(events: list[SimEvent]) -> list[tuple[float, float]]:
    iv = sorted((e.start, e.end) for e in events)
    merged = []
    for s, e in iv:
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def _overlap_time(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> float:
    total, i, j = 0.0, 0, 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def metrics(trace: SimTrace, window: float) -> SimMetrics:
    """Makespan, throughput, compute idle-fraction CDF, and pairwise overlap."""
    if window <= 0:
        raise ValueError("window must be positive")
    if not trace.events:
        raise ValueError("empty trace")
    makespan = trace.makespan

    busy = {res: _intervals(trace.events_for(res)) for res in RESOURCES}

    # Idle fraction of the compute resource per fixed sampling window, over
    # the compute-active span only: once the last kernel retires, the batch's
    # remaining drain and optimizer tail overlap the next batch's scheduling
    # in continuous training, so those windows say nothing about GPU idleness.
    compute_end = max((e.end for e in trace.events_for("compute")), default=0.0)
    n_win = max(1, int(np.ceil(compute_end / window))) if compute_end > 0 else 1
    idle = np.empty(n_win)
    for w in range(n_win):
        lo, hi = w * window, min((w + 1) * window, compute_end)
        span = hi - lo
        occupied = _overlap_time(busy["compute"], [(lo, hi)])
        idle[w] = 1.0 - occupied / span if span > 0 else 0.0
    idle_sorted = np.sort(idle)

    overlap = {}
    for ai in range(len(RESOURCES)):
        for bi in range(ai + 1, len(RESOURCES)):
            a, c = RESOURCES[ai], RESOURCES[bi]
            inter = _overlap_time(busy[a], busy[c])
            union = (sum(e - s for s, e in busy[a]) + sum(e - s for s, e in busy[c]) - inter)
            overlap[f"{a}+{c}"] = inter / union if union > 0 else 0.0

    n_images = trace.n_microbatches
    return SimMetrics(
        makespan=makespan,
        throughput=n_images / makespan,
        idle_cdf_x=idle_sorted,
        idle_cdf_y=np.arange(1, n_win + 1) / n_win,
        overlap=overlap,
    )


def adam_trailing_time(trace: SimTrace) -> float:
    """Optimizer time left after the batch's final gradient store completes."""
    last_st = max((e.end for e in trace.events if e.kind == "ST"), default=0.0)
    last_adam = max((e.end for e in trace.events if e.kind == "ADAM"), default=0.0)
    return max(0.0, last_adam - last_st)


def calibrate_cost_model(
    scene,
    view,
    cfg,
    repeats: int = 3,
    base: CostModel = DEFAULT_COST_MODEL,
) -> CostModel:
    """Fit the compute/adam coefficients to measured mini-trainer wall-clock.

    Times renders and backward passes over nested subsets to fit the affine
    set-size terms, and a host Adam update for the per-parameter rate.
    Transfer terms keep the base model's values: there is no real PCIe link to
    measure here. Intended for realism, not for any correctness guarantee.
    """
    import time as _time
    from dataclasses import replace

    from .culling import cull
    from .render import backward, render
    from .trainer import AdamState, apply_adam

    full = cull(scene, view, cfg.sigma_cutoff)
    if full.size < 4:
        raise ValueError("calibration view sees too few Gaussians")
    fractions = (0.25, 0.5, 1.0)
    sizes, fwd_t, bwd_t = [], [], []
    pixels = view.pixels
    loss_grad = np.ones((view.height, view.width, 3)) / pixels

    for frac in fractions:
        take = max(2, int(full.size * frac))
        subset = type(full)(view_id=full.view_id, indices=full.indices[:take], n_total=full.n_total)
        t0 = _time.perf_counter()
        for _ in range(repeats):
            render(scene, subset, view, cfg)
        t1 = _time.perf_counter()
        for _ in range(repeats):
            backward(scene, subset, view, cfg, loss_grad)
        t2 = _time.perf_counter()
        sizes.append(take)
        fwd_t.append((t1 - t0) / repeats)
        bwd_t.append((t2 - t1) / repeats)

    a = np.stack([np.array(sizes, dtype=np.float64), np.ones(len(sizes))], axis=1)
    (alpha_f, gamma_f), *_ = np.linalg.lstsq(a, np.array(fwd_t), rcond=None)
    (alpha_b, gamma_b), *_ = np.linalg.lstsq(a, np.array(bwd_t), rcond=None)

    params = scene.param_matrix()
    grads = np.ones((scene.n, PARAMS_PER_GAUSSIAN))
    adam = AdamState.fresh(scene.n)
    adam.t = 1
    t0 = _time.perf_counter()
    apply_adam(params, grads, adam, np.arange(scene.n, dtype=np.uint32))
    t1 = _time.perf_counter()
    alpha_a = (t1 - t0) / (scene.n * PARAMS_PER_GAUSSIAN)

    return replace(
        base,
        alpha_fwd=max(float(alpha_f), 0.0),
        gamma_fwd=max(float(gamma_f), 0.0),
        beta_fwd=0.0,
        alpha_bwd=max(float(alpha_b), 0.0),
        gamma_bwd=max(float(gamma_b), 0.0),
        beta_bwd=0.0,
        alpha_adam=max(float(alpha_a), 0.0),
    )
