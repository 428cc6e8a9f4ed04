"""Detail-driven primitive spawning.

New primitives are seeded where the input keyframe carries fine detail the
current model does not reproduce: a blob-response map of the image minus the
same map of the rendering gives a per-pixel spawn probability, pixels are
Bernoulli-sampled, and each sample receives a scale matched to the local
detail density and a depth from track interpolation refined by a small
photometric line search along the ray.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .frontend import gaussian_blur
from .scene import unproject

PROB_FLOOR = 1.0 / 1024.0


def _laplacian(channel: np.ndarray, sigma: float) -> np.ndarray:
    g = gaussian_blur(channel, sigma)
    p = np.pad(g, 1, mode="edge")
    n = p[:-2, 1:-1]
    s = p[2:, 1:-1]
    e = p[1:-1, 2:]
    w = p[1:-1, :-2]
    c = p[1:-1, 1:-1]
    # grouped so equal taps cancel bit-for-bit on constant inputs
    return (n + s) + (e + w) - 4.0 * c


def log_norm_map(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Per-pixel detail probability: Laplacian-of-Gaussian magnitude, capped.

    The response is the Euclidean norm of the per-channel LoG values,
    clipped to 1. Exactly zero on constant images. Borders replicate the
    nearest pixel. Accepts (H, W) or (H, W, C).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return np.minimum(np.abs(_laplacian(img, sigma)), 1.0)
    sq = np.zeros(img.shape[:2])
    for c in range(img.shape[2]):
        lap = _laplacian(img[..., c], sigma)
        sq += lap * lap
    return np.minimum(np.sqrt(sq), 1.0)


def spawn_probability(p_image: np.ndarray, p_model: np.ndarray) -> np.ndarray:
    """Detail present in the image but missing from the model rendering."""
    if p_image.shape != p_model.shape:
        raise ValueError(
            f"probability map shapes differ: {p_image.shape} vs {p_model.shape}")
    return np.maximum(p_image - p_model, 0.0)


def sample_pixels(p_spawn: np.ndarray, rng: np.random.Generator,
                  max_samples: int | None = None) -> np.ndarray:
    """Bernoulli sample per pixel; returns (N, 2) integer (x, y) coordinates
    in scan order. When max_samples is given, a deterministic thinning keeps
    every ceil(N / max_samples)-th sample."""
    u = rng.random(p_spawn.shape)
    ys, xs = np.nonzero(u < p_spawn)
    pix = np.stack([xs, ys], axis=-1)
    if max_samples is not None and len(pix) > max_samples:
        stride = int(np.ceil(len(pix) / max_samples))
        pix = pix[::stride]
    return pix


def expected_nn_scale(p_detail: np.ndarray,
                      floor: float = PROB_FLOOR) -> np.ndarray:
    """Expected distance to the nearest co-sampled pixel for a Poisson field
    of intensity p per unit area: 1 / (2 sqrt(p)), intensity floored."""
    return 1.0 / (2.0 * np.sqrt(np.maximum(p_detail, floor)))


def scale_to_3d(scale_px: np.ndarray, depth: np.ndarray,
                focal: float) -> np.ndarray:
    """Back-project a pixel footprint to a metric size at the given depth."""
    return np.asarray(depth) * np.asarray(scale_px) / focal


def prior_depth(pixels: np.ndarray, track_px: np.ndarray,
                track_depths: np.ndarray, width: int,
                k: int = 16, min_tracks: int = 20):
    """Interpolate depth at query pixels from tracked points in the frame.

    Gaussian-weighted (bandwidth width/16) k-nearest-neighbor average in
    INVERSE depth. Returns (depths (N,), ok); ok is False when fewer than
    min_tracks points support the frame, in which case depths is None.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if len(track_px) < min_tracks:
        return None, False
    h = width / 16.0
    kk = min(k, len(track_px))
    tree = cKDTree(np.asarray(track_px, dtype=np.float64))
    d, idx = tree.query(pixels, k=kk)
    if kk == 1:
        d = d[:, None]
        idx = idx[:, None]
    w = np.exp(-0.5 * (d / h) ** 2)
    w_sum = w.sum(axis=1)
    bad = w_sum < 1e-300
    w[bad] = 1.0 / kk
    w_sum[bad] = 1.0
    inv = 1.0 / np.maximum(np.asarray(track_depths, dtype=np.float64)[idx], 1e-12)
    inv_q = (w * inv).sum(axis=1) / w_sum
    return 1.0 / np.maximum(inv_q, 1e-12), True


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample a 2-D array at float coordinates, clamped to borders."""
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.000001)
    y = np.clip(y, 0.0, h - 1.000001)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def guided_depth(pixels: np.ndarray, priors: np.ndarray, gray: np.ndarray,
                 prev_gray: np.ndarray, pose, prev_pose, intr,
                 n_candidates: int = 32, halfwidth: float = 0.1,
                 patch: int = 7, ncc_min: float = 0.5):
    """Refine prior depths by a photometric sweep against the previous view.

    For each pixel, n_candidates inverse depths within +-halfwidth of the
    prior (clamped positive) are projected into the previous keyframe and
    scored with zero-normalized cross-correlation over a patch x patch
    window; the peak is polished with a quadratic fit over its neighbors.
    Pixels whose best score stays below ncc_min (or that lack a valid patch)
    keep the prior. Returns (depths, refined_mask).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    N = len(pixels)
    out = np.asarray(priors, dtype=np.float64).copy()
    refined = np.zeros(N, dtype=bool)
    if N == 0:
        return out, refined
    r = patch // 2
    h, w = gray.shape

    ix = pixels[:, 0].astype(np.int64)
    iy = pixels[:, 1].astype(np.int64)
    ok_patch = (ix >= r) & (ix < w - r) & (iy >= r) & (iy < h - r)

    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dx = dx.reshape(-1)
    dy = dy.reshape(-1)
    P = patch * patch

    inv0 = 1.0 / np.maximum(out, 1e-12)
    offsets = np.linspace(-halfwidth, halfwidth, n_candidates)
    inv_c = np.maximum(inv0[:, None] + offsets[None, :], 1e-6)   # (N, C)
    z_c = 1.0 / inv_c

    # rays through the sampled pixels in world coordinates
    C = n_candidates
    for start in range(0, N, 256):
        sl = slice(start, min(start + 256, N))
        n_sl = sl.stop - sl.start
        sel = np.nonzero(ok_patch[sl])[0]
        if len(sel) == 0:
            continue
        px = pixels[sl][sel]
        zc = z_c[sl][sel]                                        # (n, C)
        ic = inv_c[sl][sel]

        # reference patches (integer centers)
        gx = ix[sl][sel]
        gy = iy[sl][sel]
        ref = gray[(gy[:, None] + dy[None, :]),
                   (gx[:, None] + dx[None, :])]                   # (n, P)
        ref_mu = ref.mean(axis=1, keepdims=True)
        ref_zm = ref - ref_mu
        ref_sd = np.sqrt((ref_zm ** 2).sum(axis=1))

        # candidate world points for every depth
        n = len(sel)
        Xw = unproject(intr, pose, np.repeat(px, C, axis=0),
                       zc.reshape(-1))                            # (n*C, 3)
        pc = (prev_pose.R @ Xw.T).T + prev_pose.translation
        z_prev = pc[:, 2]
        valid = z_prev > 1e-9
        zs = np.where(valid, z_prev, 1.0)
        u = intr.focal * pc[:, 0] / zs + intr.cx
        v = intr.focal * pc[:, 1] / zs + intr.cy
        valid &= (u >= r) & (u < w - 1 - r) & (v >= r) & (v < h - 1 - r)

        tgt = bilinear(prev_gray,
                       (u[:, None] + dx[None, :]).reshape(-1),
                       (v[:, None] + dy[None, :]).reshape(-1)).reshape(-1, P)
        tgt_mu = tgt.mean(axis=1, keepdims=True)
        tgt_zm = tgt - tgt_mu
        tgt_sd = np.sqrt((tgt_zm ** 2).sum(axis=1))

        num = (np.repeat(ref_zm, C, axis=0) * tgt_zm).sum(axis=1)
        den = np.repeat(ref_sd, C) * tgt_sd
        ncc = np.where((den > 1e-12) & valid, num / np.maximum(den, 1e-12),
                       -np.inf).reshape(n, C)

        best = np.argmax(ncc, axis=1)
        best_ncc = ncc[np.arange(n), best]
        good = best_ncc >= ncc_min
        if not good.any():
            continue

        inv_best = ic[np.arange(n), best]
        interior = good & (best > 0) & (best < C - 1)
        if interior.any():
            ii = np.nonzero(interior)[0]
            nm = ncc[ii, best[ii] - 1]
            n0 = ncc[ii, best[ii]]
            np_ = ncc[ii, best[ii] + 1]
            finite = np.isfinite(nm) & np.isfinite(np_)
            nm = np.where(finite, nm, n0)
            np_ = np.where(finite, np_, n0)
            denom = nm - 2 * n0 + np_
            safe = np.abs(denom) > 1e-12
            delta = np.where(safe, 0.5 * (nm - np_) / np.where(safe, denom, 1.0),
                             0.0)
            delta = np.clip(delta, -1.0, 1.0)
            step = offsets[1] - offsets[0]
            inv_best[ii] = np.maximum(inv_best[ii] + delta * step, 1e-6)

        gsel = np.nonzero(good)[0]
        glob = sl.start + sel[gsel]
        out[glob] = 1.0 / inv_best[gsel]
        refined[glob] = True
    return out, refined


def spawn_gaussians(active, positions: np.ndarray, colors: np.ndarray,
                    scales: np.ndarray, birth_index: int, intro_iter: int,
                    opacity: float = 0.1) -> int:
    """Append isotropic, axis-aligned primitives to the active set."""
    m = len(positions)
    if m == 0:
        return 0
    log_s = np.log(np.maximum(np.asarray(scales, dtype=np.float64), 1e-12))
    if log_s.ndim == 1:
        log_s = np.repeat(log_s[:, None], 3, axis=1)
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    logit = float(np.log(opacity / (1.0 - opacity)))
    active.append(
        positions=np.asarray(positions, dtype=np.float64),
        log_scales=log_s,
        rotations=rot,
        opacity_logits=np.full(m, logit),
        colors=np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0),
        birth_index=birth_index,
        intro_iter=intro_iter,
    )
    return m


def spawn_for_keyframe(active, image: np.ndarray, rendered: np.ndarray,
                       gray: np.ndarray, prev_gray: np.ndarray | None,
                       pose, prev_pose, intr, track_px: np.ndarray,
                       track_depths: np.ndarray, rng: np.random.Generator,
                       cfg, birth_index: int, intro_iter: int,
                       rendered_depth: np.ndarray | None = None,
                       rendered_valid: np.ndarray | None = None) -> dict:
    """Full spawn pass for one keyframe. Returns diagnostics.

    When too few tracks are visible for interpolated depth priors, the
    rendered depth map (where valid) stands in; with neither available the
    pass spawns nothing.
    """
    p_img = log_norm_map(image, cfg.sampler_sigma)
    p_mod = log_norm_map(rendered, cfg.sampler_sigma)
    p_s = spawn_probability(p_img, p_mod)
    pix = sample_pixels(p_s, rng, cfg.sampler_max_spawn)
    info = dict(n_sampled=len(pix), n_spawned=0, n_refined=0,
                depth_ok=False)
    if len(pix) == 0:
        return info

    depths, ok = prior_depth(pix, track_px, track_depths, intr.width,
                             cfg.sampler_knn, cfg.sampler_min_tracks)
    info["depth_ok"] = bool(ok)
    if not ok:
        if rendered_depth is None:
            return info
        d = rendered_depth[pix[:, 1], pix[:, 0]]
        v = (rendered_valid[pix[:, 1], pix[:, 0]]
             if rendered_valid is not None else d > 0)
        pix, depths = pix[v], d[v]
        if len(pix) == 0:
            return info
    if prev_gray is not None:
        depths, refined = guided_depth(
            pix, depths, gray, prev_gray, pose, prev_pose, intr,
            cfg.sampler_candidates, cfg.sampler_inv_depth_halfwidth,
            cfg.sampler_patch, cfg.sampler_ncc_min)
        info["n_refined"] = int(refined.sum())

    p_l = p_img[pix[:, 1], pix[:, 0]]
    s_px = expected_nn_scale(p_l, cfg.sampler_prob_floor)
    s_3d = scale_to_3d(s_px, depths, intr.focal)
    pos = unproject(intr, pose, pix.astype(np.float64), depths)
    col = image[pix[:, 1], pix[:, 0]]
    info["n_spawned"] = spawn_gaussians(active, pos, col, s_3d, birth_index,
                                        intro_iter, cfg.spawn_opacity)
    return info
