"""Photometric optimization of primitives and poses.

Loss is 0.8 L1 + 0.2 (1 - SSIM) with a fully analytic gradient; training
follows a coarse-to-fine pyramid schedule and uses per-primitive Adam whose
learning rate decays with primitive age, so long-lived geometry stabilizes
while fresh primitives stay plastic.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from . import renderer
from .scene import (ActiveSet, CameraIntrinsics, PARAM_WIDTHS, Pose,
                    rotation6d_to_matrix)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def downsample(img: np.ndarray, levels: int = 1) -> np.ndarray:
    """Repeated 2x2 average pooling (image dims assumed divisible)."""
    out = np.asarray(img, dtype=np.float64)
    for _ in range(levels):
        h, w = out.shape[:2]
        out = 0.25 * (out[0:h:2, 0:w:2] + out[1:h:2, 0:w:2]
                      + out[0:h:2, 1:w:2] + out[1:h:2, 1:w:2])
    return out


def level_for_iteration(it: int, l_max: int = 3, step: int = 5) -> int:
    """Coarse-to-fine schedule for 1-based iteration numbers."""
    return max(l_max - (it - 1) // step, 0)


def _ssim_window(sigma: float = SSIM_SIGMA, size: int = SSIM_WINDOW):
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_WIN = _ssim_window()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable window convolution with zero padding (self-adjoint)."""
    out = correlate1d(img, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WIN, axis=1, mode="constant", cval=0.0)


def ssim(pred: np.ndarray, target: np.ndarray):
    """Mean SSIM over pixels/channels and the gradient w.r.t. pred.

    Inputs are (H, W, C) or (H, W) in [0, 1]. Zero-padded Gaussian window,
    so the convolution adjoint equals the convolution itself.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    mx = np.empty_like(x)
    my = np.empty_like(x)
    x2 = np.empty_like(x)
    y2 = np.empty_like(x)
    xy = np.empty_like(x)
    for c in range(x.shape[2]):
        mx[..., c] = _blur(x[..., c])
        my[..., c] = _blur(y[..., c])
        x2[..., c] = _blur(x[..., c] * x[..., c])
        y2[..., c] = _blur(y[..., c] * y[..., c])
        xy[..., c] = _blur(x[..., c] * y[..., c])
    sxx = x2 - mx * mx
    syy = y2 - my * my
    sxy = xy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    n = S.size

    # partials w.r.t. the convolution outputs feeding S
    inv = 1.0 / (B1 * B2)
    dS_dxy = 2 * A1 * inv
    dS_dx2 = -S / B2
    dS_dmx = (2 * my * A2 * inv - 2 * mx * S / B1
              - my * dS_dxy + 2 * mx * S / B2)
    grad = np.empty_like(x)
    for c in range(x.shape[2]):
        grad[..., c] = (_blur(dS_dmx[..., c])
                        + 2 * x[..., c] * _blur(dS_dx2[..., c])
                        + y[..., c] * _blur(dS_dxy[..., c]))
    grad /= n
    if pred.ndim == 2:
        grad = grad[..., 0]
    return float(S.mean()), grad


def photometric_loss(pred: np.ndarray, target: np.ndarray,
                     ssim_weight: float = 0.2):
    """0.8 L1 + 0.2 (1 - SSIM); returns (loss, dloss/dpred)."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim(x, y)
    loss = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s)
    grad = (1.0 - ssim_weight) * g_l1 - ssim_weight * g_s
    return loss, grad


# ---------------------------------------------------------------------------
# parameter updates


def _pack_grads(grads: dict, n: int) -> np.ndarray:
    """Stack per-parameter gradients into the (N, 14) moment layout."""
    cols = []
    for name, width in PARAM_WIDTHS:
        g = grads[name]
        cols.append(g.reshape(n, width))
    return np.concatenate(cols, axis=1)


def adam_step(active: ActiveSet, grads: dict, cfg, scene_extent: float,
              update_mask: np.ndarray | None = None) -> None:
    """Per-primitive Adam with age-decayed learning rates.

    Primitive age is its own update count, so newly spawned primitives start
    at the full rate regardless of when they joined. Colors are clamped to
    [0, 1] after the step.
    """
    n = len(active)
    if n == 0:
        return
    g = _pack_grads(grads, n)
    if update_mask is None:
        update_mask = np.ones(n, dtype=bool)
    m = update_mask
    active.steps[m] += 1
    t = active.steps[m].astype(np.float64)

    active.exp_avg[m] = (ADAM_BETA1 * active.exp_avg[m]
                         + (1 - ADAM_BETA1) * g[m])
    active.exp_avg_sq[m] = (ADAM_BETA2 * active.exp_avg_sq[m]
                            + (1 - ADAM_BETA2) * g[m] * g[m])
    mhat = active.exp_avg[m] / (1 - ADAM_BETA1 ** t)[:, None]
    vhat = active.exp_avg_sq[m] / (1 - ADAM_BETA2 ** t)[:, None]

    base = np.empty(14)
    base[0:3] = cfg.lr_position * scene_extent
    base[3:6] = cfg.lr_scale
    base[6:10] = cfg.lr_rotation
    base[10] = cfg.lr_opacity
    base[11:14] = cfg.lr_color
    lr = base[None, :] * (cfg.lr_decay ** (t - 1.0))[:, None]

    step = lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    off = 0
    for name, width in PARAM_WIDTHS:
        arr = getattr(active, name)
        flat = arr.reshape(n, width)
        flat[m] -= step[:, off:off + width]
        off += width
    np.clip(active.colors, 0.0, 1.0, out=active.colors)


class PoseAdam:
    """Adam state for one camera pose (rotation6d + translation)."""

    def __init__(self, lr: float):
        self.lr = lr
        self.m = np.zeros(9)
        self.v = np.zeros(9)
        self.t = 0

    def step(self, pose: Pose, g_r6: np.ndarray, g_t: np.ndarray) -> None:
        g = np.concatenate([g_r6, g_t])
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * g
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * g * g
        mhat = self.m / (1 - ADAM_BETA1 ** self.t)
        vhat = self.v / (1 - ADAM_BETA2 ** self.t)
        d = self.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        pose.rotation6d = pose.rotation6d - d[:6]
        pose.translation = pose.translation - d[6:]


def cull(active: ActiveSet, threshold: float) -> int:
    """Remove primitives whose opacity fell below the threshold."""
    if len(active) == 0:
        return 0
    op = 1.0 / (1.0 + np.exp(-active.opacity_logits))
    keep = op >= threshold
    removed = int((~keep).sum())
    if removed:
        active.keep(keep)
    return removed


def scene_extent_of(positions: np.ndarray) -> float:
    """Radius of the primitive cloud (position lr scale)."""
    if len(positions) == 0:
        return 1.0
    c = positions.mean(axis=0)
    return float(max(np.linalg.norm(positions - c, axis=1).max(), 1e-6))


# ---------------------------------------------------------------------------
# training loops


def train_iteration(active: ActiveSet, image: np.ndarray, pose: Pose,
                    intr: CameraIntrinsics, level: int, cfg,
                    scene_extent: float,
                    pose_opt: PoseAdam | None = None,
                    update_mask: np.ndarray | None = None) -> float:
    """One render / loss / backward / update cycle on a single view."""
    out = renderer.render(active, pose, intr, level=level, near=cfg.near_plane)
    target = downsample(image, level) if level else np.asarray(
        image, dtype=np.float64)
    loss, g_img = photometric_loss(out.color, target, cfg.ssim_weight)
    grads = renderer.backward(out, g_img)
    adam_step(active, grads, cfg, scene_extent, update_mask)
    if pose_opt is not None:
        pose_opt.step(pose, grads["pose_rotation6d"], grads["pose_translation"])
    return loss


def optimize_after_keyframe(active: ActiveSet, keyframes: list,
                            new_index: int, intr: CameraIntrinsics, cfg,
                            pose_opts: dict, rng: np.random.Generator,
                            train_ids: list) -> list:
    """Joint primitive/pose refinement after a keyframe is registered.

    keyframes: mapping index -> object with .image (HxWx3 float) and .pose.
    train_ids: recent non-test keyframe indices eligible as training views;
    each iteration draws one uniformly (seeded) from the last train_window
    of them plus the new keyframe. The new keyframe's pose stays frozen for
    the first cfg.pose_freeze_iters iterations. Returns per-iteration loss.
    """
    losses = []
    candidates = list(train_ids)
    if new_index not in candidates:
        candidates.append(new_index)
    candidates = candidates[-cfg.train_window:]
    for it in range(1, cfg.iterations + 1):
        level = level_for_iteration(it, cfg.l_max, cfg.level_step)
        view = candidates[int(rng.integers(len(candidates)))]
        kf = keyframes[view]
        freeze = view == new_index and it <= cfg.pose_freeze_iters
        pose_opt = None if freeze else pose_opts.get(view)
        extent = scene_extent_of(active.positions)
        loss = train_iteration(active, kf.image, kf.pose, intr, level, cfg,
                               extent, pose_opt)
        losses.append(loss)
    return losses


def finetune_anchor(anchor, keyframes: dict, intr: CameraIntrinsics, cfg,
                    epochs: int, seed: int) -> ActiveSet:
    """Offline refinement of one anchor against its own source keyframes.

    Runs epochs * len(keyframe_ids) full-resolution iterations, cycling the
    anchor's keyframes in seeded random order, poses held fixed. Returns the
    refined primitives as an ActiveSet (optimizer state carried over); the
    caller writes results back into anchor storage.
    """
    active = ActiveSet()
    active.positions = anchor.positions.astype(np.float64)
    active.log_scales = anchor.log_scales.astype(np.float64)
    active.rotations = anchor.rotations.astype(np.float64)
    active.opacity_logits = anchor.opacity_logits.astype(np.float64)
    active.colors = anchor.colors.astype(np.float64)
    n = len(active.positions)
    active.birth = anchor.birth.astype(np.int64)
    active.intro_iter = np.zeros(n, dtype=np.int64)
    active.ids = np.arange(n, dtype=np.int64)
    active._next_id = n
    active.exp_avg = anchor.exp_avg.astype(np.float64)
    active.exp_avg_sq = anchor.exp_avg_sq.astype(np.float64)
    active.steps = np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(np.random.SeedSequence([seed, anchor.id]))
    ids = list(anchor.keyframe_ids)
    total = epochs * len(ids)
    for _ in range(total):
        view = ids[int(rng.integers(len(ids)))]
        kf = keyframes[view]
        extent = scene_extent_of(active.positions)
        train_iteration(active, kf.image, kf.pose, intr, level=0, cfg=cfg,
                        scene_extent=extent, pose_opt=None)
    return active


def refine_pose_photometric(pose: Pose, splats, image: np.ndarray,
                            intr: CameraIntrinsics, cfg,
                            iters: int = 30) -> Pose:
    """Pose-only photometric alignment (held-out view registration).

    Gradients flow to the camera only; primitives are read-only. Coarse to
    fine over the same schedule as training.
    """
    p = pose.copy()
    opt = PoseAdam(cfg.lr_pose)
    img = np.asarray(image, dtype=np.float64)
    for it in range(1, iters + 1):
        level = level_for_iteration(it, cfg.l_max, cfg.level_step)
        out = renderer.render(splats, p, intr, level=level, near=cfg.near_plane)
        target = downsample(img, level) if level else img
        _, g_img = photometric_loss(out.color, target, cfg.ssim_weight)
        grads = renderer.backward(out, g_img)
        opt.step(p, grads["pose_rotation6d"], grads["pose_translation"])
    return p
