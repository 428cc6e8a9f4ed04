"""CPU Gaussian splatting: projection, front-to-back compositing, analytic backward.

Primitives are depth-sorted (primitive-index tie-break) and composited
front-to-back per pixel. The backward pass walks the same order in reverse and
reproduces every forward culling decision, so its gradients are exact for the
rendered function. Compositing runs in numba kernels; everything around them
is vectorized numpy in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import (CameraIntrinsics, Pose, quat_to_matrix, quat_vjp,
                    rotation6d_vjp)

COV_DILATION = 0.3        # px^2 added to the diagonal of every 2D covariance
DEFAULT_T_CUT = 1e-4      # transmittance early-stop
DEFAULT_EXTENT = 3.0      # sigma multiplier for screen-space culling
DEPTH_ALPHA_MIN = 0.5     # depth declared invalid below this accumulated alpha


@njit(cache=True)
def _forward_kernel(order, means, conics, opac, colors, depths, radii,
                    height, width, t_cut,
                    out_color, out_T, out_alpha, out_depth_sum,
                    n_touch, n_contrib):
    for oi in range(order.shape[0]):
        i = order[oi]
        r = radii[i]
        mx = means[i, 0]
        my = means[i, 1]
        x0 = int(np.ceil(mx - r))
        x1 = int(np.floor(mx + r))
        y0 = int(np.ceil(my - r))
        y1 = int(np.floor(my + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        if x1 < x0 or y1 < y0:
            continue
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        o = opac[i]
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                n_touch[y, x] += 1
                T = out_T[y, x]
                if T < t_cut:
                    continue
                dx = x - mx
                dy = y - my
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                alpha = o * np.exp(power)
                w = alpha * T
                out_color[y, x, 0] += w * colors[i, 0]
                out_color[y, x, 1] += w * colors[i, 1]
                out_color[y, x, 2] += w * colors[i, 2]
                out_alpha[y, x] += w
                out_depth_sum[y, x] += w * depths[i]
                out_T[y, x] = T * (1.0 - alpha)
                n_contrib[y, x] += 1


@njit(cache=True)
def _backward_kernel(order, means, conics, opac, colors, radii,
                     height, width, final_T, skip, dL_dC,
                     d_mean, d_conic, d_opac, d_color):
    T_cur = final_T.copy()
    A_rear = np.zeros((height, width, 3))
    for oi in range(order.shape[0] - 1, -1, -1):
        i = order[oi]
        r = radii[i]
        mx = means[i, 0]
        my = means[i, 1]
        x0 = int(np.ceil(mx - r))
        x1 = int(np.floor(mx + r))
        y0 = int(np.ceil(my - r))
        y1 = int(np.floor(my + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        if x1 < x0 or y1 < y0:
            continue
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        o = opac[i]
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                if skip[y, x] > 0:
                    skip[y, x] -= 1
                    continue
                dx = x - mx
                dy = y - my
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                G = np.exp(power)
                alpha = o * G
                one_m = 1.0 - alpha
                T_i = T_cur[y, x] / one_m
                w = alpha * T_i
                g0 = dL_dC[y, x, 0]
                g1 = dL_dC[y, x, 1]
                g2 = dL_dC[y, x, 2]
                d_color[i, 0] += w * g0
                d_color[i, 1] += w * g1
                d_color[i, 2] += w * g2
                d_alpha = (g0 * (colors[i, 0] * T_i - A_rear[y, x, 0] / one_m)
                           + g1 * (colors[i, 1] * T_i - A_rear[y, x, 1] / one_m)
                           + g2 * (colors[i, 2] * T_i - A_rear[y, x, 2] / one_m))
                d_opac[i] += d_alpha * G
                d_power = d_alpha * o * G
                d_conic[i, 0] += d_power * (-0.5 * dx * dx)
                d_conic[i, 1] += d_power * (-dx * dy)
                d_conic[i, 2] += d_power * (-0.5 * dy * dy)
                d_mean[i, 0] += d_power * (a * dx + b * dy)
                d_mean[i, 1] += d_power * (b * dx + c * dy)
                A_rear[y, x, 0] += w * colors[i, 0]
                A_rear[y, x, 1] += w * colors[i, 1]
                A_rear[y, x, 2] += w * colors[i, 2]
                T_cur[y, x] = T_i


def project_gaussian(positions, log_scales, rotations, pose: Pose,
                     intr: CameraIntrinsics, near: float = 0.01):
    """Project 3D Gaussians to screen space.

    Returns (mean2d (N,2), cov2d packed (N,3) as (Sxx, Sxy, Syy) with the
    +0.3 px^2 diagonal dilation applied, depth (N,), in_front (N,)) plus a
    dict of intermediates reused by the backward chain.
    """
    positions = np.asarray(positions, dtype=np.float64)
    Wm = pose.R
    p_cam = positions @ Wm.T + pose.translation
    z = p_cam[:, 2]
    in_front = z > near

    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    Rq = quat_to_matrix(np.asarray(rotations, dtype=np.float64))
    # world covariance R diag(s^2) R^T
    RS2 = Rq * (s ** 2)[:, None, :]
    sigma_w = RS2 @ np.swapaxes(Rq, -1, -2)

    f = intr.focal
    zs = np.where(in_front, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    mean2d = np.stack([f * x / zs + intr.cx, f * y / zs + intr.cy], axis=-1)

    J = np.zeros((len(positions), 2, 3))
    J[:, 0, 0] = f / zs
    J[:, 1, 1] = f / zs
    J[:, 0, 2] = -f * x / zs ** 2
    J[:, 1, 2] = -f * y / zs ** 2
    M = J @ Wm
    cov_full = M @ sigma_w @ np.swapaxes(M, -1, -2)
    A = cov_full[:, 0, 0] + COV_DILATION
    B = cov_full[:, 0, 1]
    C = cov_full[:, 1, 1] + COV_DILATION
    cov2d = np.stack([A, B, C], axis=-1)
    ctx = dict(p_cam=p_cam, s=s, Rq=Rq, sigma_w=sigma_w, J=J, M=M, Wm=Wm)
    return mean2d, cov2d, z, in_front, ctx


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3)
    alpha: np.ndarray      # (H, W) accumulated opacity
    depth: np.ndarray      # (H, W) alpha-weighted expected depth
    valid_depth: np.ndarray  # (H, W) bool, alpha >= 0.5
    n_contrib: np.ndarray  # (H, W) int32 contributing primitive count
    level: int
    ctx: dict              # saved tensors for backward


def render(splats, pose: Pose, intr: CameraIntrinsics, level: int = 0,
           near: float = 0.01, t_cut: float = DEFAULT_T_CUT,
           extent_sigma: float = DEFAULT_EXTENT) -> RenderOutput:
    """Render primitives into the camera at the given pyramid level.

    `splats` is anything exposing positions / log_scales / rotations /
    opacity_logits / colors arrays. Level l halves image dims l times and
    scales the intrinsics to match.
    """
    intr_l = intr.scaled(level) if level else intr
    H, W = intr_l.height, intr_l.width

    positions = np.asarray(splats.positions, dtype=np.float64)
    log_scales = np.asarray(splats.log_scales, dtype=np.float64)
    rotations = np.asarray(splats.rotations, dtype=np.float64)
    opacity_logits = np.asarray(splats.opacity_logits, dtype=np.float64)
    colors = np.asarray(splats.colors, dtype=np.float64)

    out_color = np.zeros((H, W, 3))
    out_T = np.ones((H, W))
    out_alpha = np.zeros((H, W))
    out_depth_sum = np.zeros((H, W))
    n_touch = np.zeros((H, W), dtype=np.int32)
    n_contrib = np.zeros((H, W), dtype=np.int32)

    n = len(positions)
    ctx = dict(level=level, intr=intr_l, pose=pose, near=near, t_cut=t_cut,
               n_total=n)
    if n == 0:
        depth = np.zeros((H, W))
        return RenderOutput(out_color, out_alpha, depth,
                            np.zeros((H, W), dtype=bool), n_contrib, level, ctx)

    mean2d, cov2d, z, in_front, proj_ctx = project_gaussian(
        positions, log_scales, rotations, pose, intr_l, near)
    idx = np.nonzero(in_front)[0]

    A, B, C = cov2d[idx, 0], cov2d[idx, 1], cov2d[idx, 2]
    det = A * C - B * B
    inv_det = 1.0 / det
    conic = np.stack([C * inv_det, -B * inv_det, A * inv_det], axis=-1)
    lam_max = 0.5 * (A + C) + np.sqrt(np.maximum(0.25 * (A - C) ** 2 + B * B, 0.0))
    radii = np.minimum(extent_sigma * np.sqrt(lam_max), float(W + H))

    means_s = np.ascontiguousarray(mean2d[idx])
    conic_s = np.ascontiguousarray(conic)
    opac_s = 1.0 / (1.0 + np.exp(-opacity_logits[idx]))
    colors_s = np.ascontiguousarray(colors[idx])
    depths_s = np.ascontiguousarray(z[idx])
    radii_s = np.ascontiguousarray(radii)

    # front-to-back: depth sort, stable in original index order for ties
    order = np.argsort(depths_s, kind="stable").astype(np.int64)

    _forward_kernel(order, means_s, conic_s, opac_s, colors_s, depths_s,
                    radii_s, H, W, t_cut, out_color, out_T, out_alpha,
                    out_depth_sum, n_touch, n_contrib)

    depth = out_depth_sum / np.maximum(out_alpha, 1e-12)
    valid = out_alpha >= DEPTH_ALPHA_MIN
    ctx.update(idx=idx, order=order, means=means_s, conics=conic_s,
               opac=opac_s, colors=colors_s, depths=depths_s, radii=radii_s,
               final_T=out_T, n_touch=n_touch, n_contrib=n_contrib,
               cov2d=cov2d[idx], logits=opacity_logits[idx],
               positions=positions, rotations=rotations, **proj_ctx)
    return RenderOutput(out_color, out_alpha, depth, valid, n_contrib, level, ctx)


def render_depth(splats, pose: Pose, intr: CameraIntrinsics, level: int = 0,
                 **kw):
    """Alpha-weighted expected depth and its validity mask (alpha >= 0.5)."""
    out = render(splats, pose, intr, level=level, **kw)
    return out.depth, out.valid_depth


def backward(out: RenderOutput, dL_dcolor: np.ndarray) -> dict:
    """Gradients of a scalar loss through the rendered color image.

    Returns per-primitive gradients (positions, log_scales, rotations,
    opacity_logits, colors) over the full input set and the pose gradients
    (rotation6d, translation). Primitives culled by the near plane get zeros.
    """
    ctx = out.ctx
    n_total = ctx["n_total"]
    grads = dict(
        positions=np.zeros((n_total, 3)),
        log_scales=np.zeros((n_total, 3)),
        rotations=np.zeros((n_total, 4)),
        opacity_logits=np.zeros(n_total),
        colors=np.zeros((n_total, 3)),
        pose_rotation6d=np.zeros(6),
        pose_translation=np.zeros(3),
    )
    if n_total == 0 or len(ctx["idx"]) == 0:
        return grads

    idx = ctx["idx"]
    m = len(idx)
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_color = np.zeros((m, 3))
    intr = ctx["intr"]
    skip = (ctx["n_touch"] - ctx["n_contrib"]).astype(np.int32)
    _backward_kernel(ctx["order"], ctx["means"], ctx["conics"], ctx["opac"],
                     ctx["colors"], ctx["radii"], intr.height, intr.width,
                     ctx["final_T"], skip, np.ascontiguousarray(dL_dcolor),
                     d_mean, d_conic, d_opac, d_color)

    # conic -> 2D covariance: dL/dSigma = -Q Gm Q, Q = conic as a matrix
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0] = ctx["conics"][:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = ctx["conics"][:, 1]
    Q[:, 1, 1] = ctx["conics"][:, 2]
    Gm = np.empty((m, 2, 2))
    Gm[:, 0, 0] = d_conic[:, 0]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gm[:, 1, 1] = d_conic[:, 2]
    d_cov = -Q @ Gm @ Q

    M = ctx["M"][idx]
    sigma_w = ctx["sigma_w"][idx]
    J = ctx["J"][idx]
    Wm = ctx["Wm"]
    Rq = ctx["Rq"][idx]
    s = ctx["s"][idx]
    p_cam = ctx["p_cam"][idx]
    p_w = ctx["positions"][idx]

    d_M = 2.0 * d_cov @ M @ sigma_w
    d_sigma_w = np.swapaxes(M, -1, -2) @ d_cov @ M
    d_J = d_M @ Wm.T
    d_W_cov = np.swapaxes(J, -1, -2) @ d_M

    f = intr.focal
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z

    d_pcam = np.zeros((m, 3))
    # through the projection Jacobian entries
    d_pcam[:, 0] += d_J[:, 0, 2] * (-f * inv_z2)
    d_pcam[:, 1] += d_J[:, 1, 2] * (-f * inv_z2)
    d_pcam[:, 2] += ((d_J[:, 0, 0] + d_J[:, 1, 1]) * (-f * inv_z2)
                     + d_J[:, 0, 2] * (2.0 * f * x * inv_z2 * inv_z)
                     + d_J[:, 1, 2] * (2.0 * f * y * inv_z2 * inv_z))
    # through the projected mean
    gu, gv = d_mean[:, 0], d_mean[:, 1]
    d_pcam[:, 0] += gu * f * inv_z
    d_pcam[:, 1] += gv * f * inv_z
    d_pcam[:, 2] += -(x * gu + y * gv) * f * inv_z2

    # world covariance factorization
    lam = s ** 2
    d_Rq = 2.0 * d_sigma_w @ Rq * lam[:, None, :]
    RtGR = np.swapaxes(Rq, -1, -2) @ d_sigma_w @ Rq
    d_log_scale = 2.0 * lam * np.einsum("nii->ni", RtGR)
    d_q = quat_vjp(ctx["rotations"][idx], d_Rq)

    # rigid transform
    d_pw = d_pcam @ Wm
    d_W = d_W_cov.sum(axis=0) + d_pcam.T @ p_w
    d_t = d_pcam.sum(axis=0)
    d_r6 = rotation6d_vjp(ctx["pose"].rotation6d, d_W)

    o = ctx["opac"]
    d_logit = d_opac * o * (1.0 - o)

    grads["positions"][idx] = d_pw
    grads["log_scales"][idx] = d_log_scale
    grads["rotations"][idx] = d_q
    grads["opacity_logits"][idx] = d_logit
    grads["colors"][idx] = d_color
    grads["pose_rotation6d"] = d_r6
    grads["pose_translation"] = d_t
    return grads
