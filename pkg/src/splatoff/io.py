"""On-disk formats: scene blobs, float images, sparsity sets, plans, Adam state.

Binary layouts (all little-endian):
  scene.bin   magic "SPOF", version u32, N u64, then f32 arrays in parameter
              declaration order: positions, log_scales, rotations, sh_coeffs,
              opacity_logits. Cameras and the bounding box live in scene.json.
  *.spim      magic "SPIM", width u32, height u32, then h*w*3 f32 row-major.
  *.sets      concatenated records: view_id u64, count u64, sorted u32 indices.
  plan.bin    magic "SPPL", version u32, entry count u32, then per entry the
              five u32 index blocks (load, copy, store, carry, adam) whose
              lengths are listed in plan.json.
  adam.bin    magic "SPAD", version u32, N u64, t u64, lr/beta1/beta2/eps f64,
              update_untouched u32, then m and v as (N*59) f32 each.

Round-trips are bit-exact; that is what checkpoint-resume determinism and the
CLI digest tests lean on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .culling import SparsitySet
from .ordering import FinalizationSchedule
from .scene import CameraView, PARAMS_PER_GAUSSIAN, Scene
from .sim import CostModel, SimTrace
from .trainer import AdamState
from .transfer import TransferPlan

SCENE_MAGIC = b"SPOF"
IMAGE_MAGIC = b"SPIM"
PLAN_MAGIC = b"SPPL"
ADAM_MAGIC = b"SPAD"
FORMAT_VERSION = 1


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated file")
    return buf


def _expect_magic(f, magic: bytes, what: str) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"not a {what} file: bad magic {got!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported {what} version {version}")


# ---------------------------------------------------------------- scenes

def save_scene(scene: Scene, out_dir: str | Path) -> Path:
    """Write scene.json + scene.bin under out_dir; returns the json path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bin_path = out_dir / "scene.bin"
    with open(bin_path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, scene.n))
        for arr in (scene.positions, scene.log_scales, scene.rotations,
                    scene.sh_coeffs, scene.opacity_logits):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    descriptor = {
        "n_gaussians": scene.n,
        "aabb_min": [float(v) for v in scene.aabb_min],
        "aabb_max": [float(v) for v in scene.aabb_max],
        "binary": bin_path.name,
        "views": [
            {
                "id": v.id,
                "world_to_camera": v.world_to_camera.tolist(),
                "focal": [float(v.focal[0]), float(v.focal[1])],
                "principal_point": [float(v.principal_point[0]), float(v.principal_point[1])],
                "width": v.width,
                "height": v.height,
                "near": v.near,
                "far": v.far,
            }
            for v in scene.views
        ],
    }
    json_path = out_dir / "scene.json"
    json_path.write_text(json.dumps(descriptor, indent=1) + "\n")
    return json_path


def load_scene(path: str | Path) -> Scene:
    """Load a scene from its directory or its scene.json path."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    desc = json.loads(path.read_text())
    n = int(desc["n_gaussians"])

    with open(path.parent / desc["binary"], "rb") as f:
        _expect_magic(f, SCENE_MAGIC, "scene")
        (stored_n,) = struct.unpack("<Q", _read_exact(f, 8))
        if stored_n != n:
            raise ValueError("descriptor and blob disagree on Gaussian count")

        def arr(cols: int) -> np.ndarray:
            raw = _read_exact(f, n * cols * 4)
            a = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            return a.reshape(n, cols) if cols > 1 else a

        positions = arr(3)
        log_scales = arr(3)
        rotations = arr(4)
        sh_coeffs = arr(48)
        opacity_logits = arr(1)

    views = [
        CameraView(
            id=int(v["id"]),
            world_to_camera=np.array(v["world_to_camera"], dtype=np.float64),
            focal=(float(v["focal"][0]), float(v["focal"][1])),
            principal_point=(float(v["principal_point"][0]), float(v["principal_point"][1])),
            width=int(v["width"]),
            height=int(v["height"]),
            near=float(v["near"]),
            far=float(v["far"]),
        )
        for v in desc["views"]
    ]
    return Scene(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        sh_coeffs=sh_coeffs,
        opacity_logits=opacity_logits,
        views=views,
        aabb_min=np.array(desc["aabb_min"], dtype=np.float64),
        aabb_max=np.array(desc["aabb_max"], dtype=np.float64),
    )


# ---------------------------------------------------------------- images

def save_image(image: np.ndarray, path: str | Path) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"not an image file: bad magic {magic!r}")
        w, h = struct.unpack("<II", _read_exact(f, 8))
        raw = _read_exact(f, h * w * 3 * 4)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h, w, 3)


# ---------------------------------------------------------------- sparsity sets

def save_sparsity_sets(sets: list[SparsitySet], path: str | Path) -> None:
    with open(path, "wb") as f:
        for s in sets:
            f.write(struct.pack("<QQ", s.view_id, s.size))
            f.write(np.ascontiguousarray(s.indices, dtype="<u4").tobytes())


def load_sparsity_sets(path: str | Path, n_total: int) -> list[SparsitySet]:
    sets = []
    with open(path, "rb") as f:
        while True:
            header = f.read(16)
            if not header:
                break
            if len(header) != 16:
                raise ValueError("truncated file")
            view_id, count = struct.unpack("<QQ", header)
            raw = _read_exact(f, count * 4)
            indices = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
            sets.append(SparsitySet(view_id=view_id, indices=indices, n_total=n_total))
    return sets


# ---------------------------------------------------------------- plans

def save_plans(
    plans: list[TransferPlan],
    n_total: int,
    out_dir: str | Path,
    meta: dict | None = None,
) -> Path:
    """Write plan.json + plan.bin under out_dir; returns the json path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bin_path = out_dir / "plan.bin"
    entries = []
    with open(bin_path, "wb") as f:
        f.write(PLAN_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(plans)))
        for p in plans:
            blocks = (p.load_set, p.cache_copy_set, p.grad_store_set,
                      p.grad_carry_set, p.adam_set)
            entries.append({
                "microbatch": p.microbatch,
                "load": int(blocks[0].size),
                "copy": int(blocks[1].size),
                "store": int(blocks[2].size),
                "carry": int(blocks[3].size),
                "adam": int(blocks[4].size),
            })
            for b in blocks:
                f.write(np.ascontiguousarray(b, dtype="<u4").tobytes())

    payload = {"n_total": n_total, "binary": bin_path.name, "entries": entries}
    if meta:
        payload["meta"] = meta
    json_path = out_dir / "plan.json"
    json_path.write_text(json.dumps(payload, indent=1) + "\n")
    return json_path


def load_plans(path: str | Path) -> tuple[list[TransferPlan], int, dict]:
    """Returns (plans, n_total, meta) from a plan.json path or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "plan.json"
    desc = json.loads(path.read_text())
    n_total = int(desc["n_total"])
    plans = []
    with open(path.parent / desc["binary"], "rb") as f:
        magic = f.read(4)
        if magic != PLAN_MAGIC:
            raise ValueError(f"not a plan file: bad magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported plan version {version}")
        if count != len(desc["entries"]):
            raise ValueError("descriptor and blob disagree on entry count")
        for entry in desc["entries"]:
            blocks = []
            for key in ("load", "copy", "store", "carry", "adam"):
                raw = _read_exact(f, int(entry[key]) * 4)
                blocks.append(np.frombuffer(raw, dtype="<u4").astype(np.uint32))
            plans.append(TransferPlan(
                microbatch=int(entry["microbatch"]),
                load_set=blocks[0], cache_copy_set=blocks[1],
                grad_store_set=blocks[2], grad_carry_set=blocks[3],
                adam_set=blocks[4],
            ))
    return plans, n_total, desc.get("meta", {})


def schedule_from_plans(plans: list[TransferPlan], n_total: int) -> FinalizationSchedule:
    """Rebuild the finalization schedule a plan list encodes in its adam sets."""
    last_touch = np.zeros(n_total, dtype=np.int32)
    f_sets = [np.array([], dtype=np.uint32) for _ in range(len(plans))]
    for i, p in enumerate(plans[:-1], start=1):  # drain entry carries no chunk
        last_touch[p.adam_set] = i
        f_sets[i] = p.adam_set.copy()
    f_sets[0] = np.flatnonzero(last_touch == 0).astype(np.uint32)
    return FinalizationSchedule(last_touch=last_touch, f_sets=f_sets)


# ---------------------------------------------------------------- optimizer state

def save_adam(adam: AdamState, path: str | Path) -> None:
    n = adam.m.shape[0]
    with open(path, "wb") as f:
        f.write(ADAM_MAGIC)
        f.write(struct.pack("<IQQ", FORMAT_VERSION, n, adam.t))
        f.write(struct.pack("<ddddI", adam.lr, adam.beta1, adam.beta2, adam.eps,
                            int(adam.update_untouched)))
        f.write(np.ascontiguousarray(adam.m, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(adam.v, dtype="<f4").tobytes())


def load_adam(path: str | Path) -> AdamState:
    with open(path, "rb") as f:
        _expect_magic(f, ADAM_MAGIC, "optimizer state")
        n, t = struct.unpack("<QQ", _read_exact(f, 16))
        lr, beta1, beta2, eps, untouched = struct.unpack("<ddddI", _read_exact(f, 36))
        cols = PARAMS_PER_GAUSSIAN
        m = np.frombuffer(_read_exact(f, n * cols * 4), dtype="<f4").astype(np.float32).reshape(n, cols)
        v = np.frombuffer(_read_exact(f, n * cols * 4), dtype="<f4").astype(np.float32).reshape(n, cols)
    return AdamState(m=m, v=v, t=int(t), lr=lr, beta1=beta1, beta2=beta2,
                     eps=eps, update_untouched=bool(untouched))


# ---------------------------------------------------------------- json helpers

def save_cost_model(cm: CostModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataclasses.asdict(cm), indent=1, sort_keys=True) + "\n")


def load_cost_model(path: str | Path) -> CostModel:
    data = json.loads(Path(path).read_text())
    return CostModel(**data)


def save_trace_csv(trace: SimTrace, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["resource", "kind", "microbatch", "start", "end"])
        for e in trace.events:
            writer.writerow([e.resource, e.kind, e.microbatch,
                             f"{e.start:.9f}", f"{e.end:.9f}"])


def write_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
