"""Per-microbatch transfer planning and exact byte accounting.

A batch of B ordered working sets S_1..S_B becomes B+1 plan entries. Entry i
describes the transition into microbatch i: parameters for S_i \\ S_{i-1} load
from host, parameters for S_i & S_{i-1} copy between device staging buffers,
gradients for S_{i-1} \\ S_i store to host (where they accumulate into the
host-side gradient buffer), and gradients for S_{i-1} & S_i stay on device.
Entry B+1 is the drain: it only stores the last working set's gradients.
S_0 and S_{B+1} are empty, so every entry satisfies the same algebra.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .culling import SparsitySet
from .ordering import FinalizationSchedule
from .scene import AttributeLayout, DEFAULT_LAYOUT

_EMPTY = np.empty(0, dtype=np.uint32)


@dataclass
class TransferPlan:
    """Load/copy/store/carry index sets for one microbatch transition."""

    microbatch: int  # 1-based; B+1 is the drain entry
    load_set: np.ndarray  # S_i \ S_{i-1}, host -> device
    cache_copy_set: np.ndarray  # S_i & S_{i-1}, device -> device (params)
    grad_store_set: np.ndarray  # S_{i-1} \ S_i, device -> host
    grad_carry_set: np.ndarray  # S_{i-1} & S_i, stays on device
    adam_set: np.ndarray  # F_i, finalized right after microbatch i


@dataclass
class VolumeReport:
    """Byte totals per direction plus the per-entry breakdown."""

    host_to_device_bytes: int
    device_to_host_bytes: int
    device_copy_bytes: int
    writeback_bytes: int
    per_microbatch_h2d: list[int] = field(default_factory=list)
    per_microbatch_d2h: list[int] = field(default_factory=list)
    per_microbatch_copy: list[int] = field(default_factory=list)
    per_microbatch_writeback: list[int] = field(default_factory=list)

    @property
    def total_transfer_bytes(self) -> int:
        """PCIe traffic: loads, stores, and the post-Adam resident refresh."""
        return self.host_to_device_bytes + self.device_to_host_bytes + self.writeback_bytes


def plan_batch(
    ordered_sets: list[SparsitySet],
    schedule: FinalizationSchedule,
) -> list[TransferPlan]:
    """Turn ordered working sets into B+1 transfer plans.

    The schedule must be the finalization schedule of exactly these sets in
    this order; anything inconsistent is rejected.
    """
    b = len(ordered_sets)
    if b == 0:
        raise ValueError("empty batch")
    if schedule.n_microbatches != b:
        raise ValueError("schedule covers a different number of microbatches")
    n = ordered_sets[0].n_total
    if schedule.n_total != n:
        raise ValueError("schedule covers a different Gaussian count")

    # Reject a schedule that was not derived from these sets: F_i must be the
    # preimage of last-touch under this exact order.
    recomputed = np.zeros(n, dtype=np.int32)
    for i, s in enumerate(ordered_sets, start=1):
        if s.n_total != n:
            raise ValueError("sparsity sets disagree on the Gaussian count")
        recomputed[s.indices] = i
    if not np.array_equal(recomputed, schedule.last_touch):
        raise ValueError("finalization schedule is inconsistent with the ordered sets")

    plans = []
    prev = _EMPTY
    for i in range(1, b + 2):
        cur = ordered_sets[i - 1].indices if i <= b else _EMPTY
        plans.append(TransferPlan(
            microbatch=i,
            load_set=np.setdiff1d(cur, prev, assume_unique=True),
            cache_copy_set=np.intersect1d(cur, prev, assume_unique=True),
            grad_store_set=np.setdiff1d(prev, cur, assume_unique=True),
            grad_carry_set=np.intersect1d(prev, cur, assume_unique=True),
            adam_set=schedule.f_sets[i] if i <= b else _EMPTY,
        ))
        prev = cur
    return plans


def volume(plans: list[TransferPlan], layout: AttributeLayout = DEFAULT_LAYOUT) -> VolumeReport:
    """Exact byte accounting for a plan list.

    Loads move offload records, stores move full gradient records, device
    copies move both (cached parameters plus carried gradients), and the
    write-back refreshes the 10 resident floats of every finalized Gaussian
    after its host Adam update.
    """
    h2d, d2h, copy, wb = [], [], [], []
    for p in plans:
        h2d.append(p.load_set.size * layout.offload_record_bytes)
        d2h.append(p.grad_store_set.size * layout.grad_record_bytes)
        copy.append(p.cache_copy_set.size * layout.offload_record_bytes
                    + p.grad_carry_set.size * layout.grad_record_bytes)
        wb.append(p.adam_set.size * layout.selection_critical_bytes)
    return VolumeReport(
        host_to_device_bytes=sum(h2d),
        device_to_host_bytes=sum(d2h),
        device_copy_bytes=sum(copy),
        writeback_bytes=sum(wb),
        per_microbatch_h2d=h2d,
        per_microbatch_d2h=d2h,
        per_microbatch_copy=copy,
        per_microbatch_writeback=wb,
    )


def naive_offload_volume(
    n: int,
    batch: int,
    layout: AttributeLayout = DEFAULT_LAYOUT,
) -> VolumeReport:
    """Baseline that round-trips every Gaussian every microbatch."""
    if n < 0 or batch < 0:
        raise ValueError("counts must be non-negative")
    h2d = [n * layout.offload_record_bytes] * batch
    d2h = [n * layout.grad_record_bytes] * batch
    return VolumeReport(
        host_to_device_bytes=sum(h2d),
        device_to_host_bytes=sum(d2h),
        device_copy_bytes=0,
        writeback_bytes=0,
        per_microbatch_h2d=h2d,
        per_microbatch_d2h=d2h,
        per_microbatch_copy=[0] * batch,
        per_microbatch_writeback=[0] * batch,
    )
