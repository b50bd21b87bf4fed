"""Gaussian scene representation, synthetic generation, and memory accounting.

A scene holds N anisotropic 3D Gaussians, each carrying 59 learnable floats:
position (3), log-scale (3), rotation quaternion w-x-y-z (4), spherical-harmonic
color coefficients (16 basis functions x 3 channels = 48), and an opacity logit.
Parameters are stored unconstrained; activations (exp on scale, sigmoid on
opacity) are applied at use sites so the optimizer never sees a constraint.

Storage is struct-of-arrays float32. All derived math upcasts to float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Parameter layout, in declaration order. Everything that packs or unpacks a
# 59-float record must agree with these offsets.
POSITION_DIM = 3
LOG_SCALE_DIM = 3
ROTATION_DIM = 4
SH_DIM = 48
OPACITY_DIM = 1
PARAMS_PER_GAUSSIAN = POSITION_DIM + LOG_SCALE_DIM + ROTATION_DIM + SH_DIM + OPACITY_DIM  # 59

PARAM_BYTES_PER_FLOAT = 4
# param + grad + Adam m + Adam v, each one float32 copy of the 59 parameters
MODEL_STATE_COPIES = 4

CAMERA_PATHS = ("orbit", "grid-flyover", "street-line")


def _pad64(nbytes: int) -> int:
    return ((nbytes + 63) // 64) * 64


@dataclass(frozen=True)
class AttributeLayout:
    """Byte layout of the attribute partition used by the offload machinery.

    Selection-critical floats (position, scale, rotation) stay device-resident;
    the rest travel in padded per-Gaussian records. Gradient records always
    carry all 59 floats.
    """

    selection_critical_floats: int = POSITION_DIM + LOG_SCALE_DIM + ROTATION_DIM  # 10
    non_critical_floats: int = SH_DIM + OPACITY_DIM  # 49
    param_bytes_per_float: int = PARAM_BYTES_PER_FLOAT
    offload_record_bytes: int = _pad64((SH_DIM + OPACITY_DIM) * PARAM_BYTES_PER_FLOAT)  # 196 -> 256
    grad_record_bytes: int = _pad64(PARAMS_PER_GAUSSIAN * PARAM_BYTES_PER_FLOAT)  # 236 -> 256

    def __post_init__(self):
        if self.selection_critical_floats + self.non_critical_floats != PARAMS_PER_GAUSSIAN:
            raise ValueError("attribute partition must cover all 59 floats")
        if self.offload_record_bytes % 64 or self.grad_record_bytes % 64:
            raise ValueError("record sizes must be multiples of 64 bytes")
        if self.offload_record_bytes < self.non_critical_floats * self.param_bytes_per_float:
            raise ValueError("offload record smaller than its payload")
        if self.grad_record_bytes < PARAMS_PER_GAUSSIAN * self.param_bytes_per_float:
            raise ValueError("gradient record smaller than its payload")

    @property
    def selection_critical_bytes(self) -> int:
        return self.selection_critical_floats * self.param_bytes_per_float


DEFAULT_LAYOUT = AttributeLayout()


@dataclass
class GaussianAttributes:
    """One Gaussian's 59 learnable parameters (float64 views for math)."""

    position: np.ndarray  # (3,)
    log_scale: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) quaternion w-x-y-z, unit up to storage rounding
    sh_coeffs: np.ndarray  # (48,) = 16 basis x 3 channels, basis-major
    opacity_logit: float

    def param_count(self) -> int:
        return self.position.size + self.log_scale.size + self.rotation.size + self.sh_coeffs.size + 1


@dataclass
class CameraView:
    """Pinhole camera: pixels [0,width]x[0,height], +z forward, y down."""

    id: int
    world_to_camera: np.ndarray  # (4,4) rigid transform, float64
    focal: tuple[float, float]  # (fx, fy) in pixels
    principal_point: tuple[float, float]  # (cx, cy) in pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("degenerate image size")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def pixels(self) -> int:
        return self.width * self.height


@dataclass
class Scene:
    """Struct-of-arrays Gaussian model plus its camera views and bounding box."""

    positions: np.ndarray  # (N,3) f32
    log_scales: np.ndarray  # (N,3) f32
    rotations: np.ndarray  # (N,4) f32
    sh_coeffs: np.ndarray  # (N,48) f32
    opacity_logits: np.ndarray  # (N,) f32
    views: list[CameraView]
    aabb_min: np.ndarray  # (3,) f64
    aabb_max: np.ndarray  # (3,) f64

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.log_scales.shape != (n, 3):
            raise ValueError("bad position/scale array shape")
        if self.rotations.shape != (n, 4) or self.sh_coeffs.shape != (n, SH_DIM):
            raise ValueError("bad rotation/sh array shape")
        if self.opacity_logits.shape != (n,):
            raise ValueError("bad opacity array shape")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, i: int) -> GaussianAttributes:
        return GaussianAttributes(
            position=self.positions[i].astype(np.float64),
            log_scale=self.log_scales[i].astype(np.float64),
            rotation=self.rotations[i].astype(np.float64),
            sh_coeffs=self.sh_coeffs[i].astype(np.float64),
            opacity_logit=float(self.opacity_logits[i]),
        )

    def param_matrix(self) -> np.ndarray:
        """All parameters as one (N, 59) float32 matrix, declaration order."""
        return np.hstack([
            self.positions,
            self.log_scales,
            self.rotations,
            self.sh_coeffs,
            self.opacity_logits[:, None],
        ]).astype(np.float32, copy=False)

    def set_param_matrix(self, params: np.ndarray) -> None:
        if params.shape != (self.n, PARAMS_PER_GAUSSIAN):
            raise ValueError(f"expected ({self.n}, {PARAMS_PER_GAUSSIAN}) parameter matrix")
        params = params.astype(np.float32, copy=False)
        self.positions = params[:, 0:3].copy()
        self.log_scales = params[:, 3:6].copy()
        self.rotations = params[:, 6:10].copy()
        self.sh_coeffs = params[:, 10:58].copy()
        self.opacity_logits = params[:, 58].copy()

    def copy(self) -> "Scene":
        return Scene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            opacity_logits=self.opacity_logits.copy(),
            views=list(self.views),
            aabb_min=self.aabb_min.copy(),
            aabb_max=self.aabb_max.copy(),
        )


@dataclass
class SceneSpec:
    """Recipe for a synthetic scene: box, population, and a camera path."""

    n_gaussians: int
    box_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    box_max: tuple[float, float, float] = (30.0, 30.0, 30.0)
    camera_path: str = "orbit"
    n_views: int = 8
    width: int = 64
    height: int = 48
    focal: float = 0.0  # pixels; 0 means 1.2 * width
    near: float = 0.1
    far: float = 0.0  # 0 means auto from geometry
    # "auto" ties the base scale to mean inter-Gaussian spacing; a positive
    # float fixes exp(log_scale) around that value instead.
    scale_mode: str | float = "auto"

    def resolved_focal(self) -> float:
        return self.focal if self.focal > 0 else 1.2 * self.width


@dataclass(frozen=True)
class MemoryBreakdown:
    resident_bytes: int
    staged_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.resident_bytes + self.staged_bytes


def model_state_bytes(n: int) -> int:
    """Bytes of full model state (params, grads, Adam m and v) for n Gaussians."""
    if n < 0:
        raise ValueError("negative Gaussian count")
    return n * PARAMS_PER_GAUSSIAN * PARAM_BYTES_PER_FLOAT * MODEL_STATE_COPIES


def estimate_gpu_memory(
    n: int,
    layout: AttributeLayout = DEFAULT_LAYOUT,
    max_set: int = 0,
    buffers: int = 2,
) -> MemoryBreakdown:
    """Device-side footprint: resident selection-critical floats plus staged buffers.

    max_set is the largest per-view working set the staging buffers must hold;
    buffers is 1 (single) or 2 (double buffering).
    """
    if max_set > n:
        raise ValueError("max_set cannot exceed the Gaussian count")
    if buffers not in (1, 2):
        raise ValueError("buffers must be 1 or 2")
    resident = n * layout.selection_critical_floats * layout.param_bytes_per_float
    staged = buffers * max_set * (layout.offload_record_bytes + layout.grad_record_bytes)
    return MemoryBreakdown(resident_bytes=resident, staged_bytes=staged)


def _look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """World-to-camera rigid transform with +z forward and y down in image."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # forward parallel to up; pick any perpendicular
        up = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


def _make_views(spec: SceneSpec, box_min: np.ndarray, box_max: np.ndarray) -> list[CameraView]:
    center = 0.5 * (box_min + box_max)
    extent = box_max - box_min
    diag = float(np.linalg.norm(extent))
    focal = spec.resolved_focal()
    cx, cy = spec.width / 2.0, spec.height / 2.0

    views = []
    if spec.camera_path == "orbit":
        radius = 0.75 * diag
        far = spec.far if spec.far > 0 else radius + diag
        for i in range(spec.n_views):
            theta = 2.0 * math.pi * i / spec.n_views
            eye = center + radius * np.array([math.cos(theta), math.sin(theta), 0.25])
            w2c = _look_at(eye, center, np.array([0.0, 0.0, 1.0]))
            views.append(CameraView(i, w2c, (focal, focal), (cx, cy), spec.width, spec.height, spec.near, far))
    elif spec.camera_path == "grid-flyover":
        # Down-looking grid skimming above the box, row-major order.
        gx = max(1, int(math.ceil(math.sqrt(spec.n_views))))
        gy = max(1, int(math.ceil(spec.n_views / gx)))
        altitude = float(box_max[2] + 0.15 * max(extent[0], extent[1]))
        far = spec.far if spec.far > 0 else (altitude - float(box_min[2])) * 1.5
        i = 0
        for iy in range(gy):
            for ix in range(gx):
                if i >= spec.n_views:
                    break
                fx = box_min[0] + extent[0] * (ix + 0.5) / gx
                fy = box_min[1] + extent[1] * (iy + 0.5) / gy
                eye = np.array([fx, fy, altitude])
                w2c = _look_at(eye, eye + np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0]))
                views.append(CameraView(i, w2c, (focal, focal), (cx, cy), spec.width, spec.height, spec.near, far))
                i += 1
    elif spec.camera_path == "street-line":
        # Forward-looking dolly along the box's longest horizontal axis.
        axis = 0 if extent[0] >= extent[1] else 1
        far = spec.far if spec.far > 0 else 0.8 * diag
        h = box_min[2] + 0.35 * extent[2]
        for i in range(spec.n_views):
            t = (i + 0.5) / spec.n_views
            eye = center.copy()
            eye[axis] = box_min[axis] + t * extent[axis] * 0.8
            eye[2] = h
            target = eye.copy()
            target[axis] += extent[axis] * 0.15
            views.append(CameraView(i, _look_at(eye, target, np.array([0.0, 0.0, 1.0])),
                                    (focal, focal), (cx, cy), spec.width, spec.height, spec.near, far))
    else:
        raise ValueError(f"unknown camera path {spec.camera_path!r}; expected one of {CAMERA_PATHS}")
    return views


def generate_synthetic_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministically populate a box with Gaussians and a camera path.

    The same (spec, seed) pair always produces byte-identical scenes.
    """
    if spec.n_gaussians <= 0:
        raise ValueError("scene must contain at least one Gaussian")
    if spec.n_views <= 0:
        raise ValueError("scene must contain at least one view")

    rng = np.random.default_rng(seed)
    n = spec.n_gaussians
    box_min = np.asarray(spec.box_min, dtype=np.float64)
    box_max = np.asarray(spec.box_max, dtype=np.float64)
    if not np.all(box_max > box_min):
        raise ValueError("degenerate bounding box")

    positions = rng.uniform(box_min, box_max, size=(n, 3))

    volume = float(np.prod(box_max - box_min))
    if spec.scale_mode == "auto":
        # Mean spacing of n uniform points; keeps splats touching their
        # neighbors regardless of population density.
        base = 0.9 * (volume / n) ** (1.0 / 3.0)
    else:
        base = float(spec.scale_mode)
        if base <= 0:
            raise ValueError("fixed scale must be positive")
    log_scales = np.log(base) + rng.normal(0.0, 0.35, size=(n, 3))

    quats = rng.normal(0.0, 1.0, size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rng.normal(0.0, 0.8, size=(n, 3))  # DC dominates
    sh[:, 1:, :] = rng.normal(0.0, 0.08, size=(n, 15, 3))

    opacity = rng.normal(0.5, 1.2, size=n)

    views = _make_views(spec, box_min, box_max)
    return Scene(
        positions=positions.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
        rotations=quats.astype(np.float32),
        sh_coeffs=sh.reshape(n, SH_DIM).astype(np.float32),
        opacity_logits=opacity.astype(np.float32),
        views=views,
        aabb_min=box_min,
        aabb_max=box_max,
    )
