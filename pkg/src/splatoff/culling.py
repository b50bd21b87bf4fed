"""View frusta, conservative Gaussian-ellipsoid culling, and sparsity sets.

A Gaussian is kept for a view when its k-sigma ellipsoid touches every
half-space of the view frustum. The per-plane test is exact; at frustum
corners it over-approximates the true ellipsoid-polytope intersection, which
is the safe direction: culling must never drop a Gaussian that could shade a
pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraView, Scene, GaussianAttributes

PLANE_NAMES = ("left", "right", "top", "bottom", "near", "far")


@dataclass
class Frustum:
    """Six half-spaces; a point x is inside iff normals @ x + offsets >= 0."""

    normals: np.ndarray  # (6,3) unit inward normals, float64
    offsets: np.ndarray  # (6,) float64

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Boolean inside-test for an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        signed = points @ self.normals.T + self.offsets
        return np.all(signed >= 0.0, axis=-1)


@dataclass
class SparsitySet:
    """In-frustum Gaussian indices for one view; the unit of scheduling algebra."""

    view_id: int
    indices: np.ndarray  # sorted unique uint32
    n_total: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        if self.indices.size:
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise ValueError("indices must be strictly increasing")
            if int(self.indices[-1]) >= self.n_total:
                raise ValueError("index out of range")

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def rho(self) -> float:
        return self.size / self.n_total if self.n_total else 0.0


@dataclass
class SparsityReport:
    rho: np.ndarray  # per-view |S_i| / N
    mean_rho: float
    max_rho: float
    cdf_x: np.ndarray  # sorted rho values
    cdf_y: np.ndarray  # cumulative fraction at each value


def frustum_from_view(view: CameraView) -> Frustum:
    """Planes bounding pixels [0,width]x[0,height] between near and far."""
    fx, fy = view.focal
    cx, cy = view.principal_point
    if fx <= 0 or fy <= 0:
        raise ValueError("degenerate intrinsics: focal must be positive")

    # Camera-space planes (n, d). Side planes pass through the origin: e.g.
    # pixel u >= 0 means fx*x + cx*z >= 0 for z > 0.
    cam_planes = [
        (np.array([fx, 0.0, cx]), 0.0),  # left
        (np.array([-fx, 0.0, view.width - cx]), 0.0),  # right
        (np.array([0.0, fy, cy]), 0.0),  # top
        (np.array([0.0, -fy, view.height - cy]), 0.0),  # bottom
        (np.array([0.0, 0.0, 1.0]), -view.near),  # near
        (np.array([0.0, 0.0, -1.0]), view.far),  # far
    ]

    rot = view.rotation
    t = view.translation
    normals = np.empty((6, 3))
    offsets = np.empty(6)
    for i, (n_cam, d_cam) in enumerate(cam_planes):
        scale = np.linalg.norm(n_cam)
        n_cam = n_cam / scale
        d_cam = d_cam / scale
        # x_cam = R x_world + t, so the world-space plane is (R^T n, d + n.t)
        normals[i] = rot.T @ n_cam
        offsets[i] = d_cam + n_cam @ t
    return Frustum(normals=normals, offsets=offsets)


def _quat_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """(N,4) w-x-y-z quaternions (any norm) -> (N,3,3) rotation matrices."""
    q = quats / np.linalg.norm(quats, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _in_frustum_mask(
    positions: np.ndarray,
    log_scales: np.ndarray,
    rotations: np.ndarray,
    frustum: Frustum,
    k: float,
) -> np.ndarray:
    """Vectorized k-sigma ellipsoid test against all six planes."""
    if k <= 0:
        raise ValueError("k must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    R = _quat_to_rotmats(np.asarray(rotations, dtype=np.float64))

    keep = np.ones(pos.shape[0], dtype=bool)
    for n, d in zip(frustum.normals, frustum.offsets):
        # Ellipsoid support radius along -n: k * ||S R^T n||
        t = np.einsum("nji,j->ni", R, n)
        radius = k * np.sqrt(np.sum((s * t) ** 2, axis=1))
        signed = pos @ n + d
        keep &= signed >= -radius
    return keep


def gaussian_in_frustum(g: GaussianAttributes, f: Frustum, k: float = 3.0) -> bool:
    """True iff the Gaussian's k-sigma ellipsoid meets every frustum half-space."""
    mask = _in_frustum_mask(
        g.position[None, :], g.log_scale[None, :], g.rotation[None, :], f, k
    )
    return bool(mask[0])


def cull(scene: Scene, view: CameraView, k: float = 3.0) -> SparsitySet:
    """Sparsity set S_i: indices of Gaussians surviving the frustum test."""
    frustum = frustum_from_view(view)
    mask = _in_frustum_mask(scene.positions, scene.log_scales, scene.rotations, frustum, k)
    indices = np.nonzero(mask)[0].astype(np.uint32)
    return SparsitySet(view_id=view.id, indices=indices, n_total=scene.n)


def sparsity_stats(sets: list[SparsitySet]) -> SparsityReport:
    """Per-view sparsity rho_i = |S_i|/N with mean, max, and CDF samples."""
    if not sets:
        raise ValueError("need at least one sparsity set")
    n_total = sets[0].n_total
    for s in sets:
        if s.n_total != n_total:
            raise ValueError("sparsity sets disagree on the Gaussian count")
    rho = np.array([s.size / n_total for s in sets])
    order = np.sort(rho)
    cdf_y = np.arange(1, len(order) + 1) / len(order)
    return SparsityReport(
        rho=rho,
        mean_rho=float(rho.mean()),
        max_rho=float(rho.max()),
        cdf_x=order,
        cdf_y=cdf_y,
    )
