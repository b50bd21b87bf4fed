"""Shared fixtures and independent oracle helpers.

Oracles here are written from first principles on purpose: they must not
share code with the library paths they check.
"""

import numpy as np
import pytest

from splatoff.culling import SparsitySet, cull
from splatoff.scene import CameraView, Scene, SceneSpec, generate_synthetic_scene


def axis_view(width=32, height=24, focal=40.0, near=0.1, far=50.0, view_id=0):
    """Camera at the origin looking down +z with identity rotation."""
    return CameraView(
        id=view_id,
        world_to_camera=np.eye(4),
        focal=(focal, focal),
        principal_point=(width / 2, height / 2),
        width=width,
        height=height,
        near=near,
        far=far,
    )


def quat_rot(q):
    """Independent w-x-y-z quaternion to rotation matrix (normalizes first)."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def full_set(n):
    return SparsitySet(view_id=0, indices=np.arange(n, dtype=np.uint32), n_total=n)


def make_set(view_id, indices, n_total):
    idx = np.unique(np.asarray(indices, dtype=np.uint32))
    return SparsitySet(view_id=view_id, indices=idx, n_total=n_total)


def sliding_sets(rng, n_total, b, lo=0.05, hi=0.25):
    """Random batch of b working sets with partial overlap between neighbors.

    Windows slide over one shuffled index pool so consecutive sets share a
    controllable fraction, which is the regime the planner targets.
    """
    pool = rng.permutation(n_total)
    sets = []
    pos = 0
    for i in range(b):
        size = int(rng.integers(max(2, int(lo * n_total)), max(3, int(hi * n_total))))
        size = min(size, n_total)
        if pos + size > n_total:
            pos = int(rng.integers(0, n_total - size + 1))
        window = pool[pos : pos + size]
        pos += max(1, size // 2)  # half-overlap on average
        sets.append(make_set(i, window, n_total))
    return sets


def tiny_scene(n=60, views=3, seed=0, width=24, height=18, path="orbit", box=30.0):
    spec = SceneSpec(
        n_gaussians=n,
        n_views=views,
        width=width,
        height=height,
        camera_path=path,
        box_max=(box, box, box if path == "orbit" else 8.0),
    )
    return generate_synthetic_scene(spec, seed=seed)


@pytest.fixture(scope="session")
def orbit_scene():
    # Treat as read-only; tests that mutate must call .copy() first.
    spec = SceneSpec(n_gaussians=300, n_views=6, width=32, height=24)
    return generate_synthetic_scene(spec, seed=7)


@pytest.fixture(scope="session")
def flyover_scene():
    spec = SceneSpec(
        n_gaussians=250,
        n_views=8,
        width=32,
        height=24,
        camera_path="grid-flyover",
        box_max=(80.0, 80.0, 8.0),
    )
    return generate_synthetic_scene(spec, seed=11)


@pytest.fixture(scope="session")
def flyover_sets(flyover_scene):
    return [cull(flyover_scene, v, 3.0) for v in flyover_scene.views]
