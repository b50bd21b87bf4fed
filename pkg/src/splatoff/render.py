"""Miniature differentiable EWA splat renderer.

Forward: each Gaussian is projected through the pinhole camera, its 3D
covariance R S^2 R^T is pushed to the image plane by the EWA linearization
Sigma' = J W Sigma W^T J^T (plus a fixed 0.3 px^2 diagonal so Sigma' is always
invertible), and pixels composite front-to-back with weight
alpha = sigmoid(opacity_logit) * exp(-0.5 d^T Sigma'^-1 d), truncated to zero
beyond sigma_cutoff. Color comes from degree-3 spherical harmonics evaluated
at the view direction, offset +0.5, clamped at 0; leftover transmittance takes
the background color.

Backward: analytic gradients for all 59 parameters. The alpha-compositing
chain is differentiated back-to-front with the behind-composite recursion
B_k = alpha_{k+1} c_{k+1} + (1 - alpha_{k+1}) B_{k+1}, which gives
dC/dalpha_k = T_k (c_k - B_k) without dividing by (1 - alpha_k), so exactly
opaque Gaussians (alpha = 1) are handled: everything behind them gets zero
gradient, matching the true piecewise structure of occlusion.

All math is float64; scenes store float32. The public entry points take a
sparsity set and apply the same conservative frustum predicate the culling
module uses, so rendering a culled set and rendering the full scene produce
identical images by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .culling import SparsitySet, _in_frustum_mask, frustum_from_view
from .scene import CameraView, PARAMS_PER_GAUSSIAN, Scene

# Real spherical-harmonic constants, degree 0..3, 16 basis functions.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

COV2D_REGULARIZER = 0.3  # px^2, added to both diagonal entries unconditionally


@dataclass
class RenderConfig:
    sh_degree: int = 3
    sigma_cutoff: float = 3.0  # must equal the culling k for cull-equivalence
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dense_evaluation: bool = False  # evaluate all pixels instead of the cutoff bbox

    def __post_init__(self):
        if not (0 <= self.sh_degree <= 3):
            raise ValueError("sh_degree must be within 0..3")
        if self.sigma_cutoff <= 0:
            raise ValueError("sigma_cutoff must be positive")


@dataclass
class Gradients:
    """Dense (N, 59) gradient records in parameter declaration order."""

    values: np.ndarray  # float64
    accumulated: bool = False  # True once multiple views were summed into it


def sh_basis(direction: np.ndarray, degree: int) -> np.ndarray:
    """The 16 SH basis values at a unit direction; zeros above `degree`."""
    x, y, z = direction
    basis = np.zeros(16)
    basis[0] = SH_C0
    if degree >= 1:
        basis[1] = -SH_C1 * y
        basis[2] = SH_C1 * z
        basis[3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[4] = SH_C2[0] * x * y
        basis[5] = SH_C2[1] * y * z
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy)
        basis[7] = SH_C2[3] * x * z
        basis[8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        basis[9] = SH_C3[0] * y * (3.0 * xx - yy)
        basis[10] = SH_C3[1] * x * y * z
        basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        basis[14] = SH_C3[5] * z * (xx - yy)
        basis[15] = SH_C3[6] * x * (xx - yy)
    return basis


def _sh_basis_jacobian(direction: np.ndarray, degree: int) -> np.ndarray:
    """(16, 3) partials of each basis function w.r.t. the direction components."""
    x, y, z = direction
    jac = np.zeros((16, 3))
    if degree >= 1:
        jac[1] = (0.0, -SH_C1, 0.0)
        jac[2] = (0.0, 0.0, SH_C1)
        jac[3] = (-SH_C1, 0.0, 0.0)
    if degree >= 2:
        jac[4] = (SH_C2[0] * y, SH_C2[0] * x, 0.0)
        jac[5] = (0.0, SH_C2[1] * z, SH_C2[1] * y)
        jac[6] = (-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z)
        jac[7] = (SH_C2[3] * z, 0.0, SH_C2[3] * x)
        jac[8] = (2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[9] = (6.0 * SH_C3[0] * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0)
        jac[10] = (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y)
        jac[11] = (-2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * SH_C3[2] * y * z)
        jac[12] = (-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy))
        jac[13] = (SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * SH_C3[4] * x * y, 8.0 * SH_C3[4] * x * z)
        jac[14] = (2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy))
        jac[15] = (SH_C3[6] * (3.0 * xx - yy), -2.0 * SH_C3[6] * x * y, 0.0)
    return jac


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _rot_jacobians(q: np.ndarray) -> np.ndarray:
    """(4, 3, 3) partials of the rotation matrix w.r.t. a unit quaternion."""
    w, x, y, z = q
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ], dtype=np.float64)


class _Projected:
    """Per-Gaussian quantities after projection, filtered and depth-sorted."""

    __slots__ = ("ids", "mean_cam", "mean2d", "cov2d", "inv_cov2d", "color",
                 "color_raw", "opacity", "basis", "rot_w", "scale", "rot_local",
                 "quat_unit", "quat_norm", "dir", "dir_dist", "cam_center")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _project(scene: Scene, subset: SparsitySet, view: CameraView, cfg: RenderConfig) -> _Projected:
    if subset.n_total != scene.n:
        raise ValueError("sparsity set does not match the scene")
    ids = subset.indices.astype(np.int64)
    if ids.size and ids[-1] >= scene.n:
        raise ValueError("subset index out of range")

    # Same predicate the culling module applies; keeps render(culled) and
    # render(full) literally identical.
    frustum = frustum_from_view(view)
    if ids.size:
        mask = _in_frustum_mask(scene.positions[ids], scene.log_scales[ids],
                                scene.rotations[ids], frustum, cfg.sigma_cutoff)
        ids = ids[mask]

    pos = scene.positions[ids].astype(np.float64)
    log_scale = scene.log_scales[ids].astype(np.float64)
    quat = scene.rotations[ids].astype(np.float64)
    sh = scene.sh_coeffs[ids].astype(np.float64).reshape(-1, 16, 3)
    logits = scene.opacity_logits[ids].astype(np.float64)

    rot_w = view.rotation
    mean_cam = pos @ rot_w.T + view.translation
    # Guard against degenerate projections; the frustum test already excludes
    # anything a camera could legitimately see at z <= 0.
    ok = mean_cam[:, 2] > 1e-9
    ids, pos, log_scale, quat, sh, logits, mean_cam = (
        ids[ok], pos[ok], log_scale[ok], quat[ok], sh[ok], logits[ok], mean_cam[ok])

    m = ids.size
    fx, fy = view.focal
    cx, cy = view.principal_point

    quat_norm = np.linalg.norm(quat, axis=1)
    quat_unit = quat / quat_norm[:, None]
    scale = np.exp(log_scale)

    mean2d = np.empty((m, 2))
    cov2d = np.empty((m, 2, 2))
    rot_local = np.empty((m, 3, 3))
    for j in range(m):
        x, y, z = mean_cam[j]
        mean2d[j] = (fx * x / z + cx, fy * y / z + cy)
        R = _quat_to_rot(quat_unit[j])
        rot_local[j] = R
        M = R * scale[j][None, :]  # columns scaled: M = R diag(s)
        sigma3 = M @ M.T
        sigma_cam = rot_w @ sigma3 @ rot_w.T
        J = np.array([
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ])
        cov2d[j] = J @ sigma_cam @ J.T
        cov2d[j, 0, 0] += COV2D_REGULARIZER
        cov2d[j, 1, 1] += COV2D_REGULARIZER

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv_cov2d = np.empty_like(cov2d)
    if m:
        inv_cov2d[:, 0, 0] = cov2d[:, 1, 1] / det
        inv_cov2d[:, 1, 1] = cov2d[:, 0, 0] / det
        inv_cov2d[:, 0, 1] = -cov2d[:, 0, 1] / det
        inv_cov2d[:, 1, 0] = -cov2d[:, 1, 0] / det

    cam_center = view.camera_center()
    delta = pos - cam_center
    dist = np.linalg.norm(delta, axis=1)
    direction = delta / dist[:, None]

    basis = np.stack([sh_basis(direction[j], cfg.sh_degree) for j in range(m)]) \
        if m else np.zeros((0, 16))
    color_raw = np.einsum("nb,nbc->nc", basis, sh) + 0.5
    color = np.maximum(color_raw, 0.0)
    opacity = 1.0 / (1.0 + np.exp(-logits))

    # Front-to-back depth order; index breaks ties so the order is total.
    order = np.lexsort((ids, mean_cam[:, 2]))
    return _Projected(
        ids=ids[order], mean_cam=mean_cam[order], mean2d=mean2d[order],
        cov2d=cov2d[order], inv_cov2d=inv_cov2d[order], color=color[order],
        color_raw=color_raw[order], opacity=opacity[order], basis=basis[order],
        rot_w=rot_w, scale=scale[order], rot_local=rot_local[order],
        quat_unit=quat_unit[order], quat_norm=quat_norm[order],
        dir=direction[order], dir_dist=dist[order], cam_center=cam_center,
    )


def _bbox(mean2d, cov2d, cutoff, width, height, dense):
    if dense:
        return 0, height - 1, 0, width - 1
    rx = cutoff * np.sqrt(max(cov2d[0, 0], 0.0)) + 1.0
    ry = cutoff * np.sqrt(max(cov2d[1, 1], 0.0)) + 1.0
    x0 = max(0, int(np.floor(mean2d[0] - rx - 0.5)))
    x1 = min(width - 1, int(np.ceil(mean2d[0] + rx - 0.5)))
    y0 = max(0, int(np.floor(mean2d[1] - ry - 0.5)))
    y1 = min(height - 1, int(np.ceil(mean2d[1] + ry - 0.5)))
    return y0, y1, x0, x1


def _gaussian_weights(proj: _Projected, j: int, px: np.ndarray, py: np.ndarray,
                      cutoff_sq: float) -> np.ndarray:
    """Truncated kernel values G on the pixel grid."""
    dx = px - proj.mean2d[j, 0]
    dy = py - proj.mean2d[j, 1]
    a = proj.inv_cov2d[j]
    adx = a[0, 0] * dx + a[0, 1] * dy
    ady = a[1, 0] * dx + a[1, 1] * dy
    md = dx * adx + dy * ady
    return np.where(md <= cutoff_sq, np.exp(-0.5 * md), 0.0)


def render64(scene: Scene, subset: SparsitySet, view: CameraView, cfg: RenderConfig) -> np.ndarray:
    """Full-precision (float64) render, used by numerical gradient checks."""
    proj = _project(scene, subset, view, cfg)
    h, w = view.height, view.width
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    bg = np.asarray(cfg.background, dtype=np.float64)

    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    cutoff_sq = cfg.sigma_cutoff ** 2

    for j in range(proj.ids.size):
        y0, y1, x0, x1 = _bbox(proj.mean2d[j], proj.cov2d[j],
                               cfg.sigma_cutoff, w, h, cfg.dense_evaluation)
        if x1 < x0 or y1 < y0:
            continue
        px = xs[x0:x1 + 1][None, :]
        py = ys[y0:y1 + 1][:, None]
        g = _gaussian_weights(proj, j, px, py, cutoff_sq)
        alpha = proj.opacity[j] * g
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        image[sl] += (trans[sl] * alpha)[:, :, None] * proj.color[j]
        trans[sl] *= 1.0 - alpha

    image += trans[:, :, None] * bg
    return image


def render(scene: Scene, subset: SparsitySet, view: CameraView, cfg: RenderConfig) -> np.ndarray:
    """Composite the subset's Gaussians into an (H, W, 3) float32 image."""
    return render64(scene, subset, view, cfg).astype(np.float32)


def backward(
    scene: Scene,
    subset: SparsitySet,
    view: CameraView,
    cfg: RenderConfig,
    loss_grad: np.ndarray,
) -> Gradients:
    """Analytic dLoss/dparam for every subset Gaussian; zeros elsewhere.

    loss_grad is dLoss/dImage with shape (H, W, 3).
    """
    h, w = view.height, view.width
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (h, w, 3):
        raise ValueError("loss gradient must match the view's image shape")

    proj = _project(scene, subset, view, cfg)
    m = proj.ids.size
    grads = np.zeros((scene.n, PARAMS_PER_GAUSSIAN))
    out = Gradients(values=grads)
    if m == 0:
        return out

    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    cutoff_sq = cfg.sigma_cutoff ** 2
    bg = np.asarray(cfg.background, dtype=np.float64)

    # Forward replay, storing per-Gaussian footprints and pre-composite
    # transmittance. Memory scales with total footprint area; fine at the
    # scene sizes this trainer exists for.
    boxes, g_maps, t_maps = [], [], []
    trans = np.ones((h, w))
    for j in range(m):
        y0, y1, x0, x1 = _bbox(proj.mean2d[j], proj.cov2d[j],
                               cfg.sigma_cutoff, w, h, cfg.dense_evaluation)
        if x1 < x0 or y1 < y0:
            boxes.append(None)
            g_maps.append(None)
            t_maps.append(None)
            continue
        px = xs[x0:x1 + 1][None, :]
        py = ys[y0:y1 + 1][:, None]
        g = _gaussian_weights(proj, j, px, py, cutoff_sq)
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        boxes.append(sl)
        g_maps.append(g)
        t_maps.append(trans[sl].copy())
        trans[sl] *= 1.0 - proj.opacity[j] * g

    # Backward sweep, back to front, maintaining the behind-composite image.
    behind = np.broadcast_to(bg, (h, w, 3)).copy()
    fx, fy = view.focal

    for j in range(m - 1, -1, -1):
        sl = boxes[j]
        if sl is None:
            continue
        g = g_maps[j]
        t_before = t_maps[j]
        o = proj.opacity[j]
        color = proj.color[j]
        lg = loss_grad[sl]

        weight = t_before * (o * g)
        grad_color = np.einsum("yxc,yx->c", lg, weight)

        # dC/dalpha = T (c - B); per-pixel alpha gradient summed over channels
        diff = color[None, None, :] - behind[sl]
        grad_alpha = np.einsum("yxc,yxc->yx", lg, diff) * t_before

        grad_o_total = float(np.sum(grad_alpha * g))
        grad_g = grad_alpha * o

        # Kernel chain: G = exp(-m/2), m = d^T A d, d = pixel - mean2d
        y0, x0 = sl[0].start, sl[1].start
        px = xs[x0:sl[1].stop][None, :]
        py = ys[y0:sl[0].stop][:, None]
        dx = px - proj.mean2d[j, 0]
        dy = py - proj.mean2d[j, 1]
        a = proj.inv_cov2d[j]
        adx = a[0, 0] * dx + a[0, 1] * dy
        ady = a[1, 0] * dx + a[1, 1] * dy
        grad_m = -0.5 * g * grad_g  # dG/dm = -G/2; zero where truncated

        grad_mean2d = np.array([-2.0 * np.sum(grad_m * adx), -2.0 * np.sum(grad_m * ady)])
        # dm/dSigma' = -(A d)(A d)^T
        gxx = -np.sum(grad_m * adx * adx)
        gxy = -np.sum(grad_m * adx * ady)
        gyy = -np.sum(grad_m * ady * ady)
        grad_sigma2d = np.array([[gxx, gxy], [gxy, gyy]])

        # update the behind-composite before touching earlier Gaussians
        alpha = o * g
        behind[sl] = alpha[:, :, None] * color[None, None, :] + (1.0 - alpha)[:, :, None] * behind[sl]

        # ---- chain through the projection, per Gaussian ----
        x, y, z = proj.mean_cam[j]
        J = np.array([
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ])
        R = proj.rot_local[j]
        s = proj.scale[j]
        M = R * s[None, :]
        sigma3 = M @ M.T
        sigma_cam = proj.rot_w @ sigma3 @ proj.rot_w.T

        grad_sigma_cam = J.T @ grad_sigma2d @ J
        grad_J = (grad_sigma2d + grad_sigma2d.T) @ J @ sigma_cam

        grad_mean_cam = J.T @ grad_mean2d
        grad_mean_cam[0] += grad_J[0, 2] * (-fx / (z * z))
        grad_mean_cam[1] += grad_J[1, 2] * (-fy / (z * z))
        grad_mean_cam[2] += (grad_J[0, 0] * (-fx / (z * z))
                             + grad_J[0, 2] * (2.0 * fx * x / z ** 3)
                             + grad_J[1, 1] * (-fy / (z * z))
                             + grad_J[1, 2] * (2.0 * fy * y / z ** 3))

        grad_sigma3 = proj.rot_w.T @ grad_sigma_cam @ proj.rot_w
        grad_M = (grad_sigma3 + grad_sigma3.T) @ M
        grad_s = np.einsum("ji,ji->i", grad_M, R)
        grad_log_scale = grad_s * s
        grad_R = grad_M * s[None, :]

        jac_r = _rot_jacobians(proj.quat_unit[j])
        grad_q_unit = np.einsum("qij,ij->q", jac_r, grad_R)
        qu = proj.quat_unit[j]
        grad_q = (grad_q_unit - qu * (qu @ grad_q_unit)) / proj.quat_norm[j]

        grad_mean = proj.rot_w.T @ grad_mean_cam

        # SH color: c = max(0, basis . sh + 0.5); clamp gates the gradient
        active = (proj.color_raw[j] > 0.0).astype(np.float64)
        gc = grad_color * active
        grad_sh = proj.basis[j][:, None] * gc[None, :]  # (16, 3)

        # direction feeds the basis; direction depends on the world position
        sh_mat = scene.sh_coeffs[proj.ids[j]].astype(np.float64).reshape(16, 3)
        jac_basis = _sh_basis_jacobian(proj.dir[j], cfg.sh_degree)  # (16, 3)
        grad_dir = jac_basis.T @ (sh_mat @ gc)
        d_unit = proj.dir[j]
        grad_mean += (grad_dir - d_unit * (d_unit @ grad_dir)) / proj.dir_dist[j]

        grad_logit = grad_o_total * o * (1.0 - o)

        row = grads[proj.ids[j]]
        row[0:3] += grad_mean
        row[3:6] += grad_log_scale
        row[6:10] += grad_q
        row[10:58] += grad_sh.reshape(48)
        row[58] += grad_logit

    return out


def mse_loss(image: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixels and channels, with its image gradient."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError("image and target shapes differ")
    diff = image - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad
