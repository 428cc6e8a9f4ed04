"""Mini bundle adjustment: damped least squares over cameras, points, focal.

All solves are analytic-Jacobian Levenberg-Marquardt with Huber reweighting.
The main solver eliminates point blocks with a Schur complement and runs a
dense Cholesky on the reduced camera system; a dense reference path exists
for verification. Pose-only refinement is batched across hypotheses so
hypothesis-heavy callers (pose RANSAC) stay vectorized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.transform import Rotation, Slerp

from .config import CaptureConfig, LmConfig
from .scene import (CameraIntrinsics, Pose, TrackTable, exp_so3, project,
                    umeyama, unproject)

MIN_BOOTSTRAP_TRACKS = 100
MIN_PNP_CORRESPONDENCES = 8
LAMBDA_MAX = 1e10
DIAG_FLOOR = 1e-12
BACKTRACK_TRIES = 5          # step fractions 1, 1/2, ... 1/16 per iteration
ESSENTIAL_MIN_SHARED = 30    # frame pair must share this many tracks
FOCAL_BOUNDS = (0.25, 3.0)   # plausible focal range as a multiple of width


class BootstrapFailure(RuntimeError):
    pass


class EstimationFailure(RuntimeError):
    pass


class TriangulationFailure(RuntimeError):
    pass


class AlignmentRejected(RuntimeError):
    pass


def huber_cost(e: np.ndarray, delta: float) -> float:
    e = np.abs(e)
    quad = e <= delta
    return float(np.sum(np.where(quad, 0.5 * e * e, delta * (e - 0.5 * delta))))


def huber_weights(e: np.ndarray, delta: float) -> np.ndarray:
    e = np.abs(e)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def robust_filter(residual_norms: np.ndarray, factor: float = 4.0) -> np.ndarray:
    """Keep residuals not exceeding median + factor * MAD. Returns bool mask."""
    e = np.asarray(residual_norms, dtype=np.float64)
    med = np.median(e)
    mad = np.median(np.abs(e - med))
    return e <= med + factor * mad


@dataclass
class BaProblem:
    """Cameras (rotation matrices + translations), points, shared focal."""

    R: np.ndarray                 # (n, 3, 3)
    t: np.ndarray                 # (n, 3)
    focal: float
    cx: float
    cy: float
    points: np.ndarray            # (P, 3)
    cam_idx: np.ndarray           # (K,)
    pt_idx: np.ndarray            # (K,)
    uv: np.ndarray                # (K, 2)
    fixed_cams: np.ndarray        # (n,) bool
    optimize_focal: bool = True
    optimize_points: bool = True

    def n_cam_params(self) -> int:
        return 6 * int((~self.fixed_cams).sum()) + (1 if self.optimize_focal else 0)

    def residuals(self):
        """(K, 2) pixel residuals and camera-frame depths."""
        Rc = self.R[self.cam_idx]
        tc = self.t[self.cam_idx]
        p = np.einsum("kij,kj->ki", Rc, self.points[self.pt_idx]) + tc
        z = p[:, 2]
        zs = np.where(z > 1e-12, z, 1e-12)
        r = np.empty_like(self.uv)
        r[:, 0] = self.focal * p[:, 0] / zs + self.cx - self.uv[:, 0]
        r[:, 1] = self.focal * p[:, 1] / zs + self.cy - self.uv[:, 1]
        # behind-camera observations are heavily penalized, gradient-free
        bad = z <= 1e-12
        r[bad] = 1e6
        return r, p, bad


def _build_blocks(prob: BaProblem, p_cam: np.ndarray, bad: np.ndarray):
    """Per-observation Jacobian blocks A (cam), F (focal), B (point)."""
    K = len(prob.uv)
    f = prob.focal
    x, y = p_cam[:, 0], p_cam[:, 1]
    z = np.where(p_cam[:, 2] > 1e-12, p_cam[:, 2], 1e-12)
    inv_z = 1.0 / z

    Jp = np.zeros((K, 2, 3))
    Jp[:, 0, 0] = f * inv_z
    Jp[:, 1, 1] = f * inv_z
    Jp[:, 0, 2] = -f * x * inv_z * inv_z
    Jp[:, 1, 2] = -f * y * inv_z * inv_z
    Jp[bad] = 0.0

    # rotation tangent: d(p_cam)/dw = -skew(R X) with R X = p_cam - t
    v = p_cam - prob.t[prob.cam_idx]
    S = np.zeros((K, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]

    A = np.empty((K, 2, 6))
    A[:, :, 0:3] = -Jp @ S
    A[:, :, 3:6] = Jp
    B = Jp @ prob.R[prob.cam_idx]
    F = np.stack([x * inv_z, y * inv_z], axis=-1)
    F[bad] = 0.0
    return A, F, B


def _assemble(prob: BaProblem, w: np.ndarray, r: np.ndarray,
              A: np.ndarray, F: np.ndarray, B: np.ndarray):
    """Weighted normal-equation blocks: U (C,C), g_c (C,), V (P,3,3),
    g_p (P,3), W (P,C,3)."""
    free = np.nonzero(~prob.fixed_cams)[0]
    slot = {int(c): i for i, c in enumerate(free)}
    C = prob.n_cam_params()
    P = len(prob.points)
    has_f = prob.optimize_focal

    U = np.zeros((C, C))
    g_c = np.zeros(C)
    V = np.zeros((P, 3, 3))
    g_p = np.zeros((P, 3))
    Wf = np.zeros((P, C, 3))

    if prob.optimize_points:
        wB = w[:, None, None] * B
        np.add.at(V, prob.pt_idx, np.einsum("kia,kib->kab", B, wB))
        np.add.at(g_p, prob.pt_idx, np.einsum("kia,ki->ka", wB, r))

    for c in free:
        s = slot[c]
        m = prob.cam_idx == c
        Am, wm, rm = A[m], w[m], r[m]
        wA = wm[:, None, None] * Am
        U[6 * s:6 * s + 6, 6 * s:6 * s + 6] += np.einsum("kia,kib->ab", Am, wA)
        g_c[6 * s:6 * s + 6] += np.einsum("kia,ki->a", wA, rm)
        if has_f:
            Fm = F[m]
            U[6 * s:6 * s + 6, -1] += np.einsum("kia,ki->a", wA, Fm)
            U[-1, 6 * s:6 * s + 6] = U[6 * s:6 * s + 6, -1]
        if prob.optimize_points:
            np.add.at(Wf[:, 6 * s:6 * s + 6, :], prob.pt_idx[m],
                      np.einsum("kia,kib->kab", wA, B[m]))
    if has_f:
        U[-1, -1] += float(np.sum(w * np.sum(F * F, axis=-1)))
        g_c[-1] += float(np.sum(w * np.sum(F * r, axis=-1)))
        if prob.optimize_points:
            wF = w[:, None] * F
            np.add.at(Wf[:, -1, :], prob.pt_idx,
                      np.einsum("ki,kib->kb", wF, B))
    return U, g_c, V, g_p, Wf


def solve_step(U, g_c, V, g_p, Wf, lam: float, method: str = "schur"):
    """Solve the damped system for (delta_cam, delta_pts).

    method='schur' eliminates points then Cholesky-factors the reduced camera
    system; method='dense' assembles the full matrix (verification path).
    """
    C = len(g_c)
    P = len(g_p)
    Ud = U.copy()
    di = np.arange(C)
    Ud[di, di] += lam * np.maximum(np.diag(U), DIAG_FLOOR)
    Vd = V.copy()
    dj = np.arange(3)
    Vd[:, dj, dj] += lam * np.maximum(V[:, dj, dj], DIAG_FLOOR)

    if method == "dense":
        n = C + 3 * P
        H = np.zeros((n, n))
        H[:C, :C] = Ud
        g = np.concatenate([g_c, g_p.reshape(-1)])
        for j in range(P):
            H[C + 3 * j:C + 3 * j + 3, C + 3 * j:C + 3 * j + 3] = Vd[j]
            H[:C, C + 3 * j:C + 3 * j + 3] = Wf[j]
            H[C + 3 * j:C + 3 * j + 3, :C] = Wf[j].T
        delta = np.linalg.solve(H, -g)
        return delta[:C], delta[C:].reshape(P, 3)

    if P:
        Vinv = np.linalg.inv(Vd)
        S = Ud - np.einsum("pad,pde,pbe->ab", Wf, Vinv, Wf)
        rhs = -g_c + np.einsum("pad,pde,pe->a", Wf, Vinv, g_p)
    else:
        S = Ud
        rhs = -g_c
    cf = cho_factor(S)
    dc = cho_solve(cf, rhs)
    if P:
        dp = np.einsum("pde,pe->pd", Vinv, -g_p - np.einsum("pad,a->pd", Wf, dc))
    else:
        dp = np.zeros((0, 3))
    return dc, dp


def lm_solve(prob: BaProblem, cfg: LmConfig, method: str = "schur") -> dict:
    """Levenberg-Marquardt with multiplicative damping and rollback.

    Mutates prob in place. Returns an info dict with the robust cost trace
    (accepted iterations are non-increasing), accept flags, and lambda trace.
    """
    if len(prob.uv) == 0:
        raise ValueError("problem has no residuals")
    lam = cfg.lambda_init
    r, p_cam, bad = prob.residuals()
    e = np.linalg.norm(r, axis=1)
    cost = huber_cost(e, cfg.huber_delta)
    costs = [cost]
    accepted = []
    lambdas = []
    free = np.nonzero(~prob.fixed_cams)[0]

    for _ in range(cfg.max_iters):
        w = huber_weights(e, cfg.huber_delta)
        A, F, B = _build_blocks(prob, p_cam, bad)
        U, g_c, V, g_p, Wf = _assemble(prob, w, r, A, F, B)
        lambdas.append(lam)
        try:
            dc, dp = solve_step(U, g_c, V, g_p, Wf, lam, method)
        except np.linalg.LinAlgError:
            lam = min(lam * cfg.nu, LAMBDA_MAX)
            accepted.append(False)
            costs.append(cost)
            continue

        R_old = prob.R.copy()
        t_old = prob.t.copy()
        f_old = prob.focal
        pts_old = prob.points.copy()

        # full step, then backtrack along the same direction: a long
        # Gauss-Newton step that overshoots often succeeds at a fraction,
        # and damping up instead drifts toward poor basins
        took = None
        for bt in range(BACKTRACK_TRIES):
            frac = 0.5 ** bt
            for s, c in enumerate(free):
                prob.R[c] = exp_so3(frac * dc[6 * s:6 * s + 3]) @ R_old[c]
                prob.t[c] = t_old[c] + frac * dc[6 * s + 3:6 * s + 6]
            if prob.optimize_focal:
                prob.focal = f_old + frac * dc[-1]
            if prob.optimize_points:
                prob.points = pts_old + frac * dp
            r_new, p_new, bad_new = prob.residuals()
            e_new = np.linalg.norm(r_new, axis=1)
            cost_new = huber_cost(e_new, cfg.huber_delta)
            if cost_new < cost and np.isfinite(cost_new):
                took = frac
                break

        if took is not None:
            lam = (max(lam / cfg.nu, 1e-15) if took == 1.0
                   else min(lam * cfg.nu, LAMBDA_MAX))
            improve = cost - cost_new
            cost, r, e, p_cam, bad = cost_new, r_new, e_new, p_new, bad_new
            accepted.append(True)
            costs.append(cost)
            if improve <= 1e-15 * max(cost, 1.0):
                break
        else:
            prob.R, prob.t, prob.focal, prob.points = R_old, t_old, f_old, pts_old
            lam = min(lam * cfg.nu, LAMBDA_MAX)
            accepted.append(False)
            costs.append(cost)
            if lam >= LAMBDA_MAX:
                break
    return dict(costs=np.array(costs), accepted=np.array(accepted),
                lambdas=np.array(lambdas), final_rms=float(np.sqrt(np.mean(e ** 2))),
                mean_err=float(np.mean(e)))


# ---------------------------------------------------------------------------
# batched pose-only LM (hypothesis refinement, single-pose refinement)


def _exp_so3_batch(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1, keepdims=True)
    th = np.maximum(th, 1e-30)
    k = w / th
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1] = -k[..., 2]
    K[..., 0, 2] = k[..., 1]
    K[..., 1, 0] = k[..., 2]
    K[..., 1, 2] = -k[..., 0]
    K[..., 2, 0] = -k[..., 1]
    K[..., 2, 1] = k[..., 0]
    th = th[..., None]
    return (np.eye(3) + np.sin(th) * K
            + (1 - np.cos(th)) * (K @ K))


def _pose_costs(R, t, pts, uv, f, cx, cy, delta):
    p = pts @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = p[..., 2]
    good = z > 1e-12
    zs = np.where(good, z, 1e-12)
    ru = f * p[..., 0] / zs + cx - uv[..., 0]
    rv = f * p[..., 1] / zs + cy - uv[..., 1]
    ru = np.where(good, ru, 1e6)
    rv = np.where(good, rv, 1e6)
    e = np.hypot(ru, rv)
    quad = e <= delta
    cost = np.sum(np.where(quad, 0.5 * e * e, delta * (e - 0.5 * delta)), axis=-1)
    return cost, (p, zs, ru, rv, e, good)


def pose_lm(R0: np.ndarray, t0: np.ndarray, pts: np.ndarray, uv: np.ndarray,
            intr: CameraIntrinsics, iters: int, cfg: LmConfig):
    """Batched pose-only LM. R0 (B,3,3), t0 (B,3), pts (B,M,3), uv (B,M,2).

    Returns refined (R, t), final per-batch robust cost.
    """
    R = R0.copy()
    t = t0.copy()
    B = R.shape[0]
    f, cx, cy = intr.focal, intr.cx, intr.cy
    lam = np.full(B, cfg.lambda_init)
    cost, aux = _pose_costs(R, t, pts, uv, f, cx, cy, cfg.huber_delta)

    for _ in range(iters):
        p, zs, ru, rv, e, good = aux
        w = huber_weights(e, cfg.huber_delta) * good
        inv_z = 1.0 / zs
        M = pts.shape[-2]
        Jp = np.zeros(p.shape[:-1] + (2, 3))
        Jp[..., 0, 0] = f * inv_z
        Jp[..., 1, 1] = f * inv_z
        Jp[..., 0, 2] = -f * p[..., 0] * inv_z * inv_z
        Jp[..., 1, 2] = -f * p[..., 1] * inv_z * inv_z
        v = p - t[..., None, :]
        S = np.zeros(p.shape[:-1] + (3, 3))
        S[..., 0, 1] = -v[..., 2]
        S[..., 0, 2] = v[..., 1]
        S[..., 1, 0] = v[..., 2]
        S[..., 1, 2] = -v[..., 0]
        S[..., 2, 0] = -v[..., 1]
        S[..., 2, 1] = v[..., 0]
        J = np.concatenate([-Jp @ S, Jp], axis=-1)        # (B, M, 2, 6)
        r2 = np.stack([ru, rv], axis=-1)                  # (B, M, 2)
        wJ = w[..., None, None] * J
        H = np.einsum("bmia,bmic->bac", J, wJ)
        g = np.einsum("bmia,bmi->ba", wJ, r2)
        di = np.arange(6)
        H[:, di, di] += lam[:, None] * np.maximum(H[:, di, di], DIAG_FLOOR)
        try:
            delta = np.linalg.solve(H, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            H[:, di, di] += 1e-6
            delta = np.linalg.solve(H, -g[..., None])[..., 0]
        R_try = _exp_so3_batch(delta[:, :3]) @ R
        t_try = t + delta[:, 3:]
        cost_try, aux_try = _pose_costs(R_try, t_try, pts, uv, f, cx, cy,
                                        cfg.huber_delta)
        better = cost_try < cost
        R = np.where(better[:, None, None], R_try, R)
        t = np.where(better[:, None], t_try, t)
        cost = np.where(better, cost_try, cost)
        lam = np.where(better, np.maximum(lam / cfg.nu, 1e-15),
                       np.minimum(lam * cfg.nu, LAMBDA_MAX))
        # recompute aux for the accepted mixture
        cost, aux = _pose_costs(R, t, pts, uv, f, cx, cy, cfg.huber_delta)
    return R, t, cost


def estimate_pose_ransac(points3d: np.ndarray, pixels: np.ndarray,
                         intr: CameraIntrinsics, init_pose: Pose,
                         cfg: CaptureConfig, rng: np.random.Generator):
    """Minimal-sample pose hypotheses, each LM-refined, scored by inliers.

    Returns (pose, inlier_mask). Raises EstimationFailure when the best
    hypothesis explains fewer than the minimum inlier ratio.
    """
    M = len(points3d)
    if M < MIN_PNP_CORRESPONDENCES:
        raise EstimationFailure(
            f"{M} correspondences < {MIN_PNP_CORRESPONDENCES}")
    B = cfg.ransac_hypotheses
    n_s = cfg.ransac_sample
    # distinct indices per hypothesis
    keys = rng.random((B, M))
    samples = np.argsort(keys, axis=1)[:, :n_s]

    lm_cfg = LmConfig(lambda_init=cfg.lm_lambda_init, nu=cfg.lm_nu,
                      huber_delta=cfg.lm_huber_delta,
                      max_iters=cfg.ransac_lm_iters)
    R0 = np.broadcast_to(init_pose.R, (B, 3, 3)).copy()
    t0 = np.broadcast_to(init_pose.translation, (B, 3)).copy()
    R, t, _ = pose_lm(R0, t0, points3d[samples], pixels[samples], intr,
                      cfg.ransac_lm_iters, lm_cfg)

    # score every hypothesis on the full correspondence set
    p = points3d @ np.swapaxes(R, -1, -2) + t[:, None, :]
    z = p[..., 2]
    good = z > 1e-12
    zs = np.where(good, z, 1e-12)
    eu = intr.focal * p[..., 0] / zs + intr.cx - pixels[:, 0]
    ev = intr.focal * p[..., 1] / zs + intr.cy - pixels[:, 1]
    err = np.where(good, np.hypot(eu, ev), np.inf)
    inl = err < cfg.ransac_inlier_px
    counts = inl.sum(axis=1)
    best_count = counts.max()
    cands = np.nonzero(counts == best_count)[0]
    if best_count > 0:
        rms = np.array([np.sqrt(np.mean(err[c][inl[c]] ** 2)) for c in cands])
        best = cands[np.argmin(rms)]
    else:
        best = 0
    if best_count < cfg.ransac_min_inlier_ratio * M:
        raise EstimationFailure(
            f"inlier ratio {best_count / M:.3f} below "
            f"{cfg.ransac_min_inlier_ratio}")
    return Pose.from_matrix(R[best], t[best]), inl[best]


def refine_pose(pose: Pose, points3d: np.ndarray, pixels: np.ndarray,
                intr: CameraIntrinsics, cfg: CaptureConfig) -> Pose:
    """Pose-only LM over all provided correspondences (caller passes inliers)."""
    lm_cfg = LmConfig(lambda_init=cfg.lm_lambda_init, nu=cfg.lm_nu,
                      huber_delta=cfg.lm_huber_delta,
                      max_iters=cfg.refine_iters)
    R, t, _ = pose_lm(pose.R[None], pose.translation[None],
                      points3d[None], pixels[None], intr,
                      cfg.refine_iters, lm_cfg)
    return Pose.from_matrix(R[0], t[0])


# ---------------------------------------------------------------------------
# triangulation


def triangulate(poses: list, pixels: np.ndarray, intr: CameraIntrinsics,
                max_reproj_px: float = 8.0, min_angle_deg: float = 0.5,
                gn_steps: int = 3) -> np.ndarray:
    """Midpoint of the best-conditioned ray pair, polished by Gauss-Newton.

    Raises TriangulationFailure on a degenerate baseline (max pairwise ray
    angle <= min_angle_deg) or when the mean reprojection error stays above
    max_reproj_px.
    """
    n = len(poses)
    if n < 2:
        raise TriangulationFailure("need at least two observations")
    pixels = np.asarray(pixels, dtype=np.float64)
    origins = np.stack([p.camera_center() for p in poses])
    dirs = np.empty((n, 3))
    for i, p in enumerate(poses):
        d = np.array([(pixels[i, 0] - intr.cx) / intr.focal,
                      (pixels[i, 1] - intr.cy) / intr.focal, 1.0])
        d = p.R.T @ d
        dirs[i] = d / np.linalg.norm(d)

    best = (-1.0, 0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            ang = np.degrees(np.arccos(np.clip(np.abs(dirs[i] @ dirs[j]), -1, 1)))
            if ang > best[0]:
                best = (ang, i, j)
    angle, i, j = best
    if angle <= min_angle_deg:
        raise TriangulationFailure(f"baseline angle {angle:.3f} deg too small")

    # closest points between the two rays
    d1, d2 = dirs[i], dirs[j]
    o1, o2 = origins[i], origins[j]
    a = d1 @ d1
    b = d1 @ d2
    c = d2 @ d2
    rhs = o2 - o1
    den = a * c - b * b
    if den < 1e-18:
        raise TriangulationFailure("parallel rays")
    s = (c * (d1 @ rhs) - b * (d2 @ rhs)) / den
    u = (b * (d1 @ rhs) - a * (d2 @ rhs)) / den
    X = 0.5 * (o1 + s * d1 + o2 + u * d2)

    for _ in range(gn_steps):
        J = np.zeros((2 * n, 3))
        r = np.zeros(2 * n)
        for k, p in enumerate(poses):
            pc = p.R @ X + p.translation
            if pc[2] <= 1e-12:
                raise TriangulationFailure("point behind a camera")
            f = intr.focal
            z = pc[2]
            Jp = np.array([[f / z, 0, -f * pc[0] / z ** 2],
                           [0, f / z, -f * pc[1] / z ** 2]])
            J[2 * k:2 * k + 2] = Jp @ p.R
            r[2 * k] = f * pc[0] / z + intr.cx - pixels[k, 0]
            r[2 * k + 1] = f * pc[1] / z + intr.cy - pixels[k, 1]
        H = J.T @ J + 1e-12 * np.eye(3)
        X = X - np.linalg.solve(H, J.T @ r)

    errs = np.empty(n)
    for k, p in enumerate(poses):
        pc = p.R @ X + p.translation
        if pc[2] <= 1e-12:
            raise TriangulationFailure("point behind a camera")
        uv = np.array([intr.focal * pc[0] / pc[2] + intr.cx,
                       intr.focal * pc[1] / pc[2] + intr.cy])
        errs[k] = np.linalg.norm(uv - pixels[k])
    if errs.mean() > max_reproj_px:
        raise TriangulationFailure(f"mean reprojection {errs.mean():.2f} px")
    return X


# ---------------------------------------------------------------------------
# bootstrap


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        while p != self.parent[p]:
            self.parent[p] = self.parent[self.parent[p]]
            p = self.parent[p]
        self.parent[x] = p
        return p

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_tracks(features: list, matcher, n_obs_max: int | None = None) -> list:
    """Exhaustive pairwise matching into consistent multi-frame tracks.

    features: [(keypoints, descriptors), ...]. matcher takes two such
    feature tuples and returns (idx_a, idx_b, scores). Returns a list of
    observation lists [(frame, kp_index, x, y), ...] ordered by frame,
    capped to the most recent n_obs_max observations when a cap is given.
    Tracks that collect two different keypoints of the same frame are
    dropped entirely.
    """
    n = len(features)
    uf = _UnionFind()
    for i in range(n):
        for j in range(i + 1, n):
            ia, ib, _ = matcher(features[i], features[j])
            for a, b in zip(ia, ib):
                uf.union((i, int(a)), (j, int(b)))

    groups: dict = {}
    for key in list(uf.parent):
        groups.setdefault(uf.find(key), []).append(key)

    tracks = []
    for members in groups.values():
        if len(members) < 2:
            continue
        frames = [m[0] for m in members]
        if len(set(frames)) != len(frames):
            continue
        members.sort()
        obs = []
        for fr, kp in members:
            x, y = features[fr][0][kp]
            obs.append((fr, kp, float(x), float(y)))
        tracks.append(obs if n_obs_max is None else obs[-n_obs_max:])
    tracks.sort(key=lambda obs: (obs[0][0], obs[0][1]))
    return tracks


def default_matcher(feat_a, feat_b):
    """Descriptor matching plus flow-consistency outlier removal.

    feat_a/feat_b: (keypoints, descriptors) tuples as build_tracks expects.
    """
    from .frontend import filter_matches_flow, match
    ia, ib, s = match(feat_a[1], feat_b[1])
    keep = filter_matches_flow(feat_a[0], feat_b[0], ia, ib)
    return ia[keep], ib[keep], s[keep]


def _triangulate_rays(Ra, ta, Rb, tb, xa, xb):
    """Midpoint triangulation of normalized-camera rays, world = frame of a."""
    ca = -Ra.T @ ta
    cb = -Rb.T @ tb
    da = (Ra.T @ np.column_stack([xa, np.ones(len(xa))]).T).T
    db = (Rb.T @ np.column_stack([xb, np.ones(len(xb))]).T).T
    da /= np.linalg.norm(da, axis=1, keepdims=True)
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    w0 = ca - cb
    b = np.sum(da * db, axis=1)
    d = da @ w0
    e = db @ w0
    den = 1.0 - b * b
    den = np.where(np.abs(den) < 1e-12, 1e-12, den)
    s = (b * e - d) / den
    t = (e - b * d) / den
    return 0.5 * (ca + s[:, None] * da + cb + t[:, None] * db)


def _essential_from_pairs(xa, xb):
    """Normalized 8-point estimate of E with x_b^T E x_a = 0."""
    def _condition(x):
        m = x.mean(axis=0)
        s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(x - m, axis=1)), 1e-12)
        T = np.array([[s, 0, -s * m[0]], [0, s, -s * m[1]], [0, 0, 1.0]])
        return (x - m) * s, T

    na, Ta = _condition(xa)
    nb, Tb = _condition(xb)
    A = np.empty((len(xa), 9))
    A[:, 0] = nb[:, 0] * na[:, 0]
    A[:, 1] = nb[:, 0] * na[:, 1]
    A[:, 2] = nb[:, 0]
    A[:, 3] = nb[:, 1] * na[:, 0]
    A[:, 4] = nb[:, 1] * na[:, 1]
    A[:, 5] = nb[:, 1]
    A[:, 6] = na[:, 0]
    A[:, 7] = na[:, 1]
    A[:, 8] = 1.0
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    F = Tb.T @ vt[-1].reshape(3, 3) @ Ta
    u, s, vt = np.linalg.svd(F)
    sm = 0.5 * (s[0] + s[1])
    return u @ np.diag([sm, sm, 0.0]) @ vt


def _decompose_essential(E, xa, xb):
    """Cheirality-consistent (R, t) with camera a as the identity."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    best = None
    for R in (u @ W @ vt, u @ W.T @ vt):
        for sign in (1.0, -1.0):
            t = sign * u[:, 2]
            P = _triangulate_rays(np.eye(3), np.zeros(3), R, t, xa, xb)
            votes = int(np.sum((P[:, 2] > 0) & ((P @ R.T + t)[:, 2] > 0)))
            if best is None or votes > best[0]:
                best = (votes, R, t)
    return best[1], best[2]


def _two_view_init(track_obs: list, n: int, intr0: CameraIntrinsics):
    """Pose/point initialization from the widest-baseline frame pair.

    Estimates the pair's relative pose by the normalized 8-point algorithm
    (at the focal guess), triangulates the tracks the pair shares, and
    interpolates the remaining cameras along the pair by frame index.
    Returns (R (n,3,3), t (n,3), points) or None when no pair qualifies.
    """
    obs_px = [dict() for _ in range(n)]
    for j, obs in enumerate(track_obs):
        for fr, _, x, y in obs:
            obs_px[fr][j] = (x, y)
    best = None
    for i in range(n):
        for j in range(i + 1, n):
            shared = sorted(obs_px[i].keys() & obs_px[j].keys())
            if len(shared) < ESSENTIAL_MIN_SHARED:
                continue
            pa = np.array([obs_px[i][k] for k in shared])
            pb = np.array([obs_px[j][k] for k in shared])
            disp = float(np.median(np.linalg.norm(pb - pa, axis=1)))
            if best is None or disp > best[0]:
                best = (disp, i, j, shared, pa, pb)
    if best is None:
        return None
    _, ia, ib, shared, pa, pb = best
    pp = np.array([intr0.cx, intr0.cy])
    xa = (pa - pp) / intr0.focal
    xb = (pb - pp) / intr0.focal
    E = _essential_from_pairs(xa, xb)
    R, t = _decompose_essential(E, xa, xb)

    # cameras between the pair interpolated by index, outside clamped
    slerp = Slerp([float(ia), float(ib)],
                  Rotation.from_matrix(np.stack([np.eye(3), R])))
    Rs = np.empty((n, 3, 3))
    ts = np.empty((n, 3))
    for f in range(n):
        fc = float(np.clip(f, ia, ib))
        Rs[f] = slerp(fc).as_matrix()
        ts[f] = (fc - ia) / max(ib - ia, 1) * t

    tri = _triangulate_rays(np.eye(3), np.zeros(3), R, t, xa, xb)
    in_front = tri[:, 2] > 0
    depth_med = float(np.median(tri[in_front, 2])) if np.any(in_front) else 1.0
    pts = np.empty((len(track_obs), 3))
    tri_row = {k: i for i, k in enumerate(shared)}
    for j, obs in enumerate(track_obs):
        row = tri_row.get(j)
        if row is not None and in_front[row]:
            pts[j] = tri[row]
        else:
            fr0, _, x0, y0 = obs[0]
            pose = Pose.from_matrix(Rs[fr0], ts[fr0])
            pts[j] = unproject(intr0, pose, np.array([[x0, y0]]),
                               np.array([depth_med]))[0]
    return Rs, ts, pts


def bootstrap(features: list, intr: CameraIntrinsics, cfg: CaptureConfig,
              matcher=None, optimize_focal: bool = True):
    """Joint pose/point/focal estimation for the first frames.

    features: [(keypoints, descriptors)] for cfg.n_init frames. Starts from
    identity poses, depth-1 points along the first observing camera's rays,
    and focal = focal_init_factor x width (unless optimize_focal is False, in
    which case intr.focal is trusted and held). When that solve lands on a
    physically absurd focal (outside FOCAL_BOUNDS x width: the telephoto
    collapse of self-calibration), one rescue attempt re-solves from a
    two-view initialization; a still-degenerate solution raises
    BootstrapFailure. Returns (poses, intrinsics, TrackTable, info).
    """
    if matcher is None:
        matcher = default_matcher
    n = len(features)
    # all observations feed the joint solve; the per-track cap only applies
    # once tracks enter the table (supervision-window semantics)
    all_tracks = build_tracks(features, matcher, None)
    if len(all_tracks) < MIN_BOOTSTRAP_TRACKS:
        raise BootstrapFailure(
            f"{len(all_tracks)} tracks < {MIN_BOOTSTRAP_TRACKS}")
    # two-view tracks carry no redundancy: a single wrong match triangulates
    # self-consistently and biases the free focal. Prefer >= 3-observation
    # tracks when enough exist.
    track_obs = [t for t in all_tracks if len(t) >= 3]
    if len(track_obs) < MIN_BOOTSTRAP_TRACKS:
        track_obs = all_tracks

    focal0 = cfg.focal_init_factor * intr.width if optimize_focal else intr.focal
    intr0 = CameraIntrinsics(focal0, intr.cx, intr.cy, intr.width, intr.height)

    # observations -> index arrays, shared by both attempts
    cam_idx, pt_idx, uv = [], [], []
    for j, obs in enumerate(track_obs):
        for fr, _, x, y in obs:
            cam_idx.append(fr)
            pt_idx.append(j)
            uv.append((x, y))
    cam_idx = np.array(cam_idx)
    pt_idx = np.array(pt_idx)
    uv = np.array(uv, dtype=np.float64)

    def make_problem(Rs, ts, pts):
        return BaProblem(
            R=Rs, t=ts,
            focal=focal0, cx=intr.cx, cy=intr.cy,
            points=pts,
            cam_idx=cam_idx.copy(), pt_idx=pt_idx.copy(), uv=uv.copy(),
            fixed_cams=np.arange(n) == 0,
            optimize_focal=optimize_focal,
        )

    def run_schedule(prob):
        half = cfg.bootstrap_iters // 2
        info1 = lm_solve(prob, cfg.lm(half))
        # outlier rejection on half-converged residuals, pattern frozen after
        r, _, _ = prob.residuals()
        keep = robust_filter(np.linalg.norm(r, axis=1), cfg.lm_mad_factor)
        # a point needs >= 2 surviving observations to stay constrained
        counts = np.bincount(prob.pt_idx[keep], minlength=len(prob.points))
        keep &= counts[prob.pt_idx] >= 2
        prob.cam_idx = prob.cam_idx[keep]
        prob.pt_idx = prob.pt_idx[keep]
        prob.uv = prob.uv[keep]
        if len(prob.uv) == 0:
            raise BootstrapFailure("robust filter removed every observation")
        info2 = lm_solve(prob, cfg.lm(cfg.bootstrap_iters - half))
        # gauge: unit mean pairwise camera distance
        centers = np.einsum("nji,nj->ni", prob.R, -prob.t)
        dists = [np.linalg.norm(centers[i] - centers[j])
                 for i in range(n) for j in range(i + 1, n)]
        mean_d = float(np.mean(dists))
        if mean_d > 1e-12:
            prob.t *= 1.0 / mean_d
            prob.points *= 1.0 / mean_d
        return info1, info2

    def degenerate(prob):
        return optimize_focal and not (
            FOCAL_BOUNDS[0] * intr.width <= prob.focal
            <= FOCAL_BOUNDS[1] * intr.width)

    # the paper's init: coincident cameras, points at depth 1
    pts0 = np.empty((len(track_obs), 3))
    ident = Pose.identity()
    for j, obs in enumerate(track_obs):
        fr0, _, x0, y0 = obs[0]
        pts0[j] = unproject(intr0, ident, np.array([[x0, y0]]),
                            np.array([1.0]))[0]
    prob = make_problem(np.stack([np.eye(3)] * n), np.zeros((n, 3)), pts0)
    info1, info2 = run_schedule(prob)
    rescued = False

    if degenerate(prob):
        init = _two_view_init(track_obs, n, intr0)
        if init is not None:
            prob = make_problem(*init)
            info1, info2 = run_schedule(prob)
            rescued = True
            # restore the spec gauge: first camera at the identity
            R0, t0 = prob.R[0].copy(), prob.t[0].copy()
            prob.points = prob.points @ R0.T + t0
            for c in range(n):
                Rc = prob.R[c] @ R0.T
                prob.t[c] = prob.t[c] - Rc @ t0
                prob.R[c] = Rc
        if degenerate(prob):
            raise BootstrapFailure(
                f"degenerate solution: focal {prob.focal:.1f} outside "
                f"[{FOCAL_BOUNDS[0]}, {FOCAL_BOUNDS[1]}] x width {intr.width}")

    poses = [Pose.from_matrix(prob.R[i], prob.t[i]) for i in range(n)]
    intr_out = CameraIntrinsics(prob.focal, intr.cx, intr.cy,
                                intr.width, intr.height)

    table = TrackTable(cfg.n_obs_max)
    # drop tracks whose observations were fully filtered out
    surviving = np.unique(prob.pt_idx)
    for j in surviving:
        table.new_track(track_obs[j], point=prob.points[j].copy())

    info = dict(costs=np.concatenate([info1["costs"], info2["costs"]]),
                mean_err=info2["mean_err"], n_tracks=len(surviving),
                focal=prob.focal, rescued=rescued)
    return poses, intr_out, table, info


# ---------------------------------------------------------------------------
# restart logic


def rebootstrap_check(centers: np.ndarray, window: int = 20,
                      min_dist: float = 0.1 / 3.0) -> bool:
    """True when recent camera motion has degenerated (tiny mean baseline).

    Needs a full window of registered keyframes to judge; returns False
    before that.
    """
    c = np.asarray(centers, dtype=np.float64)
    if len(c) < window:
        return False
    c = c[-window:]
    gaps = np.linalg.norm(np.diff(c, axis=0), axis=1)
    return bool(np.mean(gaps) < min_dist)


def align_bootstrap(new_poses: list, old_poses: list, new_points: np.ndarray,
                    obs: list, intr: CameraIntrinsics,
                    max_px: float = 1.0):
    """Similarity-align a fresh bootstrap onto the existing trajectory.

    obs: [(local_cam_index, point_index, u, v)] from the new bootstrap.
    The gate projects the transformed points through the OLD poses: accepted
    only when the mean pixel error stays below max_px. Returns
    (aligned_poses, aligned_points, mean_err); raises AlignmentRejected.
    """
    new_c = np.stack([p.camera_center() for p in new_poses])
    old_c = np.stack([p.camera_center() for p in old_poses])
    s, R, t = umeyama(new_c, old_c, with_scale=True)

    pts_t = (s * (R @ new_points.T)).T + t
    aligned = []
    for p in new_poses:
        Rn = p.R
        Ra = Rn @ R.T
        ta = s * p.translation - Ra @ t
        aligned.append(Pose.from_matrix(Ra, ta))

    errs = []
    for ci, pi, u, v in obs:
        px, valid = project(intr, old_poses[ci], pts_t[pi][None])
        if not valid[0]:
            errs.append(float(intr.width))
            continue
        errs.append(float(np.hypot(px[0, 0] - u, px[0, 1] - v)))
    mean_err = float(np.mean(errs)) if errs else float("inf")
    if mean_err >= max_px:
        raise AlignmentRejected(f"mean projection error {mean_err:.2f} px")
    return aligned, pts_t, mean_err
