"""Desk-scale training loop that executes the transfer plans functionally.

The device is emulated: two byte-counted arenas stand in for GPU and host
memory, and every staged movement follows the TransferPlan for the batch.
Rendering happens "on device" against exactly the parameter rows the plan
loaded, gradients accumulate on device across cached microbatches and drain
to the host per the store sets, and each finalization chunk F_i receives its
Adam update as soon as microbatch i's gradients have landed (early Adam).

Correctness rests on one structural fact: a Gaussian's chunk F_i runs only
after its last touching microbatch, so no render in the batch can ever
observe a parameter the batch already updated. That is what makes early
per-chunk Adam bit-identical to one end-of-batch update, and what keeps the
device parameter cache coherent without any refresh traffic mid-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .culling import SparsitySet, cull
from .ordering import finalization_schedule
from .render import RenderConfig, backward, mse_loss, render
from .scene import (
    AttributeLayout,
    CameraView,
    DEFAULT_LAYOUT,
    PARAMS_PER_GAUSSIAN,
    Scene,
)
from .transfer import plan_batch


class CapacityError(RuntimeError):
    """Device arena cannot hold the working set of some microbatch."""

    def __init__(self, peak_bytes: int, capacity_bytes: int, microbatch: int):
        self.peak_bytes = peak_bytes
        self.capacity_bytes = capacity_bytes
        self.microbatch = microbatch
        super().__init__(
            f"device arena capacity exceeded at microbatch {microbatch}: "
            f"peak requirement {peak_bytes} bytes > capacity {capacity_bytes} bytes"
        )


@dataclass
class AdamState:
    """Adam moments for every parameter, one shared step count per batch.

    Moments and parameters live in float32 (what a checkpoint stores); the
    update arithmetic runs in float64 and rounds once on write-back, which is
    what makes early-vs-late chunk scheduling bit-reproducible.
    """

    m: np.ndarray  # (n, 59) float32
    v: np.ndarray  # (n, 59) float32
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    update_untouched: bool = False  # momentum-decay steps for zero-grad rows

    @classmethod
    def fresh(cls, n: int, lr: float = 0.01, **hyper) -> "AdamState":
        if n <= 0:
            raise ValueError("need at least one Gaussian")
        zeros = np.zeros((n, PARAMS_PER_GAUSSIAN), dtype=np.float32)
        return cls(m=zeros, v=zeros.copy(), lr=lr, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), t=self.t, lr=self.lr,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         update_untouched=self.update_untouched)


def apply_adam(
    params: np.ndarray,
    grads: np.ndarray,
    adam: AdamState,
    indices: np.ndarray,
) -> np.ndarray:
    """Adam-update the given parameter rows in place; returns updated row ids.

    Rows whose accumulated gradient is exactly zero are skipped unless the
    state asks for momentum-decay updates of untouched rows. `params` is the
    float32 (n, 59) master matrix; `grads` is float64.
    """
    if adam.t < 1:
        raise ValueError("increment adam.t before applying updates")
    rows = np.asarray(indices, dtype=np.int64)
    if rows.size == 0:
        return rows
    if not adam.update_untouched:
        rows = rows[np.any(grads[rows] != 0.0, axis=1)]
        if rows.size == 0:
            return rows

    g = grads[rows]
    m = adam.m[rows].astype(np.float64)
    v = adam.v[rows].astype(np.float64)
    m = adam.beta1 * m + (1.0 - adam.beta1) * g
    v = adam.beta2 * v + (1.0 - adam.beta2) * g * g
    m_hat = m / (1.0 - adam.beta1 ** adam.t)
    v_hat = v / (1.0 - adam.beta2 ** adam.t)
    step = adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)

    adam.m[rows] = m.astype(np.float32)
    adam.v[rows] = v.astype(np.float32)
    params[rows] = (params[rows].astype(np.float64) - step).astype(np.float32)
    return rows


@dataclass
class ArenaCounters:
    """Byte accounting for the emulated host and device arenas."""

    device_capacity_bytes: int = 0  # 0 means unlimited
    host_to_device_bytes: int = 0
    device_to_host_bytes: int = 0
    device_copy_bytes: int = 0
    writeback_bytes: int = 0
    device_high_water_bytes: int = 0
    stale_cache_refreshes: int = 0  # cached params invalidated by a mid-batch Adam
    losses: list[float] = field(default_factory=list)


def _staged_bytes(count: int, layout: AttributeLayout) -> int:
    return count * (layout.offload_record_bytes + layout.grad_record_bytes)


def train_batch(
    scene: Scene,
    views_in_batch: list[CameraView],
    order: list[int],
    cfg: RenderConfig,
    adam: AdamState,
    arenas: ArenaCounters,
    targets: list[np.ndarray],
    layout: AttributeLayout = DEFAULT_LAYOUT,
    early_adam: bool = True,
) -> tuple[Scene, AdamState, ArenaCounters]:
    """One pipelined batch over `views_in_batch[order]`, updating in place.

    `targets` is indexed like `views_in_batch`. MSE loss per view; gradients
    accumulate unnormalized (sum over the batch). With `early_adam` each
    chunk F_i updates right after microbatch i's gradients reach the host;
    otherwise all chunks run after the drain, in F-index order. Both paths
    produce bit-identical parameters.
    """
    n = scene.n
    if sorted(order) != list(range(len(views_in_batch))):
        raise ValueError("order must be a permutation of the batch")
    if len(targets) != len(views_in_batch):
        raise ValueError("one target image per view required")

    ordered_views = [views_in_batch[i] for i in order]
    ordered_sets = [cull(scene, v, k=cfg.sigma_cutoff) for v in ordered_views]
    schedule = finalization_schedule(ordered_sets, n)
    plans = plan_batch(ordered_sets, schedule)
    batch = len(ordered_views)

    adam.t += 1  # one shared step per batch

    host_params = scene.param_matrix()  # float32 master copy
    host_grad = np.zeros((n, PARAMS_PER_GAUSSIAN))
    dev_grad = np.zeros((n, PARAMS_PER_GAUSSIAN))
    resident = n * layout.selection_critical_bytes
    pending_chunks: list[np.ndarray] = []

    for step in range(1, batch + 2):  # entries 1..B, plus the drain entry
        plan = plans[step - 1]
        prev_size = ordered_sets[step - 2].size if step >= 2 else 0
        cur_size = ordered_sets[step - 1].size if step <= batch else 0

        requirement = resident + _staged_bytes(prev_size + cur_size, layout)
        arenas.device_high_water_bytes = max(arenas.device_high_water_bytes, requirement)
        if arenas.device_capacity_bytes and requirement > arenas.device_capacity_bytes:
            raise CapacityError(requirement, arenas.device_capacity_bytes, step)

        # Departure of the previous microbatch's buffers.
        store = plan.grad_store_set
        if store.size:
            host_grad[store] += dev_grad[store]
            dev_grad[store] = 0.0
            arenas.device_to_host_bytes += store.size * layout.grad_record_bytes
        arenas.device_copy_bytes += plan.grad_carry_set.size * layout.grad_record_bytes
        arenas.device_copy_bytes += plan.cache_copy_set.size * layout.offload_record_bytes
        arenas.host_to_device_bytes += plan.load_set.size * layout.offload_record_bytes

        # The previous microbatch's chunk is complete once its stores landed.
        if step >= 2:
            chunk = plans[step - 2].adam_set
            if chunk.size:
                if step <= batch:
                    # Rows updated now but still cached on device would be
                    # stale; the schedule guarantees this cannot happen.
                    stale = np.intersect1d(chunk, ordered_sets[step - 1].indices,
                                           assume_unique=True)
                    arenas.stale_cache_refreshes += int(stale.size)
                if early_adam:
                    apply_adam(host_params, host_grad, adam, chunk)
                else:
                    pending_chunks.append(chunk)
                arenas.writeback_bytes += chunk.size * layout.selection_critical_bytes

        if step > batch:
            break

        view = ordered_views[step - 1]
        target = targets[order[step - 1]]
        image = render(scene, ordered_sets[step - 1], view, cfg)
        loss, lgrad = mse_loss(image, target)
        arenas.losses.append(loss)
        grads = backward(scene, ordered_sets[step - 1], view, cfg, lgrad)
        rows = ordered_sets[step - 1].indices
        dev_grad[rows] += grads.values[rows]

    for chunk in pending_chunks:
        apply_adam(host_params, host_grad, adam, chunk)

    scene.set_param_matrix(host_params)
    return scene, adam, arenas


def train_reference(
    scene: Scene,
    views_in_batch: list[CameraView],
    cfg: RenderConfig,
    adam: AdamState,
    targets: list[np.ndarray],
) -> tuple[Scene, AdamState]:
    """No-offload oracle: full parameter set, one accumulation, one Adam step."""
    n = scene.n
    if len(targets) != len(views_in_batch):
        raise ValueError("one target image per view required")
    full = SparsitySet(view_id=0, indices=np.arange(n, dtype=np.uint32), n_total=n)

    adam.t += 1
    host_params = scene.param_matrix()
    host_grad = np.zeros((n, PARAMS_PER_GAUSSIAN))
    for view, target in zip(views_in_batch, targets):
        image = render(scene, full, view, cfg)
        _, lgrad = mse_loss(image, target)
        host_grad += backward(scene, full, view, cfg, lgrad).values

    apply_adam(host_params, host_grad, adam, np.arange(n, dtype=np.int64))
    scene.set_param_matrix(host_params)
    return scene, adam


def synth_targets(
    scene: Scene,
    views: list[CameraView],
    cfg: RenderConfig,
    seed: int,
    jitter: float = 0.05,
) -> list[np.ndarray]:
    """Target images rendered from a parameter-jittered copy of the scene.

    Gives training something to pull toward when no ground-truth images
    exist; the jittered scene plays the role of the "true" scene.
    """
    rng = np.random.default_rng(seed)
    jittered = scene.copy()
    jittered.positions += rng.normal(0.0, jitter, jittered.positions.shape).astype(np.float32)
    jittered.sh_coeffs += rng.normal(0.0, jitter, jittered.sh_coeffs.shape).astype(np.float32)
    jittered.opacity_logits += rng.normal(0.0, jitter, jittered.opacity_logits.shape).astype(np.float32)
    full = SparsitySet(view_id=0, indices=np.arange(scene.n, dtype=np.uint32), n_total=scene.n)
    return [render(jittered, full, v, cfg) for v in views]
