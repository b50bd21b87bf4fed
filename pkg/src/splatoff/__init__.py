"""Sparsity-guided CPU offload planning for Gaussian splat training.

The pipeline, end to end: cull each camera's frustum to get per-view sparsity
sets, order the batch to maximize consecutive overlap (TSP on symmetric
difference), derive the finalization schedule (which Gaussians each microbatch
touches last), plan exact load/copy/store transfers, simulate the two-stream
pipeline against a calibrated cost model, and optionally run the desk-scale
trainer that executes those plans functionally to verify the invariants the
design depends on.
"""

from .culling import Frustum, SparsityReport, SparsitySet, cull, frustum_from_view, gaussian_in_frustum, sparsity_stats
from .ordering import (
    DistanceMatrix,
    FinalizationSchedule,
    ORDER_STRATEGIES,
    Tour,
    distance_matrix,
    finalization_schedule,
    held_karp_exact,
    local_search,
    nearest_neighbor_init,
    order_views,
    tour_length,
)
from .render import Gradients, RenderConfig, backward, mse_loss, render, render64
from .scene import (
    AttributeLayout,
    CameraView,
    DEFAULT_LAYOUT,
    GaussianAttributes,
    MemoryBreakdown,
    PARAMS_PER_GAUSSIAN,
    Scene,
    SceneSpec,
    estimate_gpu_memory,
    generate_synthetic_scene,
    model_state_bytes,
)
from .sim import (
    CostModel,
    DEFAULT_COST_MODEL,
    SimEvent,
    SimMetrics,
    SimTrace,
    adam_trailing_time,
    calibrate_cost_model,
    metrics,
    simulate,
)
from .trainer import (
    AdamState,
    ArenaCounters,
    CapacityError,
    apply_adam,
    synth_targets,
    train_batch,
    train_reference,
)
from .transfer import TransferPlan, VolumeReport, naive_offload_volume, plan_batch, volume

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ArenaCounters", "AttributeLayout", "CameraView", "CapacityError",
    "CostModel", "DEFAULT_COST_MODEL", "DEFAULT_LAYOUT", "DistanceMatrix",
    "FinalizationSchedule", "Frustum", "GaussianAttributes", "Gradients",
    "MemoryBreakdown", "ORDER_STRATEGIES", "PARAMS_PER_GAUSSIAN", "RenderConfig",
    "Scene", "SceneSpec", "SimEvent", "SimMetrics", "SimTrace", "SparsityReport",
    "SparsitySet", "Tour", "TransferPlan", "VolumeReport", "adam_trailing_time",
    "apply_adam", "backward", "calibrate_cost_model", "cull", "distance_matrix",
    "estimate_gpu_memory", "finalization_schedule", "frustum_from_view",
    "gaussian_in_frustum", "generate_synthetic_scene", "held_karp_exact",
    "local_search", "metrics", "model_state_bytes", "mse_loss",
    "naive_offload_volume", "nearest_neighbor_init", "order_views", "plan_batch",
    "render", "render64", "simulate", "sparsity_stats", "synth_targets",
    "tour_length", "train_batch", "train_reference", "volume",
]
