import numpy as np
import sys
sys.path.insert(0, "src")

from gsrecon.config import CaptureConfig
from gsrecon.scene import CameraIntrinsics, Pose, exp_so3, project, umeyama
from gsrecon.miniba import (BaProblem, lm_solve, solve_step, robust_filter,
                            bootstrap, estimate_pose_ransac, refine_pose,
                            triangulate, rebootstrap_check, align_bootstrap,
                            huber_cost, EstimationFailure, TriangulationFailure)

rng = np.random.default_rng(7)
cfg = CaptureConfig()

# ---- synthetic arc: 8 cameras looking at points around origin -------------
W, H = 640, 480
f_true = 520.0          # differs from 0.7*640 = 448 init
intr_true = CameraIntrinsics(f_true, (W - 1) / 2, (H - 1) / 2, W, H)

n_cam, n_pts = 8, 160
angles = np.linspace(-0.35, 0.35, n_cam)
gt_poses = []
for a in angles:
    c = np.array([2.5 * np.sin(a), 0.15 * np.sin(2 * a), -2.5 * np.cos(a) + 0.0])
    # look at origin
    fwd = -c / np.linalg.norm(c)
    up = np.array([0.0, -1.0, 0.0])
    right = np.cross(up, fwd); right /= np.linalg.norm(right)
    up2 = np.cross(fwd, right)
    Rwc = np.stack([right, up2, fwd], axis=0)   # world->cam rows
    t = -Rwc @ c
    gt_poses.append(Pose.from_matrix(Rwc, t))

pts_gt = rng.uniform([-0.8, -0.6, -0.5], [0.8, 0.6, 0.5], (n_pts, 3))

# project all points into all cams (all visible by construction)
obs_uv = np.empty((n_cam, n_pts, 2))
for i, p in enumerate(gt_poses):
    uv, valid = project(intr_true, p, pts_gt)
    assert valid.all()
    assert (uv[:, 0] > 5).all() and (uv[:, 0] < W - 5).all(), (uv[:,0].min(), uv[:,0].max())
    assert (uv[:, 1] > 5).all() and (uv[:, 1] < H - 5).all()
    obs_uv[i] = uv

# ---- direct BaProblem solve (no frontend): noise-free recovery ------------
cam_idx = np.repeat(np.arange(n_cam), n_pts)
pt_idx = np.tile(np.arange(n_pts), n_cam)
uv_all = obs_uv.reshape(-1, 2)

prob = BaProblem(
    R=np.stack([np.eye(3)] * n_cam), t=np.zeros((n_cam, 3)),
    focal=0.7 * W, cx=intr_true.cx, cy=intr_true.cy,
    points=np.stack([np.array([0, 0, 1.0])] * n_pts) + 0*pts_gt,
    cam_idx=cam_idx, pt_idx=pt_idx, uv=uv_all.copy(),
    fixed_cams=np.arange(n_cam) == 0, optimize_focal=True)
# depth-1 init along first-cam rays
d = np.stack([(uv_all[:n_pts, 0] - intr_true.cx) / (0.7 * W),
              (uv_all[:n_pts, 1] - intr_true.cy) / (0.7 * W),
              np.ones(n_pts)], axis=-1)
prob.points = d.copy()

info = lm_solve(prob, cfg.lm(200))
print("noise-free: final mean err px =", info["mean_err"])
print("            focal =", prob.focal, " (true", f_true, ")")
r, _, _ = prob.residuals()
assert info["mean_err"] < 1e-6, info["mean_err"]

# gauge-align recovered cameras to GT for APE
centers_est = np.stack([np.linalg.solve(prob.R[i], -prob.t[i]) for i in range(n_cam)])
centers_gt = np.stack([p.camera_center() for p in gt_poses])
s, Rg, tg = umeyama(centers_est, centers_gt, with_scale=True)
ape = np.sqrt(np.mean(np.sum(((s * (Rg @ centers_est.T)).T + tg - centers_gt) ** 2, axis=1)))
span = np.linalg.norm(centers_gt.max(0) - centers_gt.min(0))
print("            APE/span =", ape / span, " focal rel err =", abs(prob.focal - f_true) / f_true)
assert ape / span < 0.01
assert abs(prob.focal - f_true) / f_true < 0.02

# cost trace monotone over accepted steps
costs = info["costs"]; acc = info["accepted"]
deltas = np.diff(costs)
assert all(d <= 1e-12 for d in deltas), "cost increased on an accepted step"
print("            cost trace monotone, iters =", len(acc), "accepted =", int(acc.sum()))

# ---- schur vs dense equivalence -------------------------------------------
from gsrecon.miniba import _build_blocks, _assemble, huber_weights
r, p_cam, bad = prob.residuals()
e = np.linalg.norm(r, axis=1)
w = huber_weights(e, 2.0)
A, F, B = _build_blocks(prob, p_cam, bad)
U, g_c, V, g_p, Wf = _assemble(prob, w, r, A, F, B)
dc1, dp1 = solve_step(U, g_c, V, g_p, Wf, 1e-5, "schur")
dc2, dp2 = solve_step(U, g_c, V, g_p, Wf, 1e-5, "dense")
rel = max(np.max(np.abs(dc1 - dc2)) / max(np.max(np.abs(dc2)), 1e-300),
          np.max(np.abs(dp1 - dp2)) / max(np.max(np.abs(dp2)), 1e-300))
print("schur vs dense rel diff =", rel)
assert rel < 1e-8

# ---- noisy arc -------------------------------------------------------------
prob2 = BaProblem(
    R=np.stack([np.eye(3)] * n_cam), t=np.zeros((n_cam, 3)),
    focal=0.7 * W, cx=intr_true.cx, cy=intr_true.cy,
    points=d.copy(),
    cam_idx=cam_idx, pt_idx=pt_idx,
    uv=uv_all + rng.normal(0, 0.5, uv_all.shape),
    fixed_cams=np.arange(n_cam) == 0, optimize_focal=True)
info2 = lm_solve(prob2, cfg.lm(200))
centers_est2 = np.stack([np.linalg.solve(prob2.R[i], -prob2.t[i]) for i in range(n_cam)])
s2, Rg2, tg2 = umeyama(centers_est2, centers_gt, with_scale=True)
ape2 = np.sqrt(np.mean(np.sum(((s2 * (Rg2 @ centers_est2.T)).T + tg2 - centers_gt) ** 2, axis=1)))
print("noisy: mean err px =", info2["mean_err"], " APE/span =", ape2 / span,
      " focal rel err =", abs(prob2.focal - f_true) / f_true)
assert ape2 / span < 0.01 and abs(prob2.focal - f_true) / f_true < 0.02

# ---- robust_filter frozen values -------------------------------------------
m = robust_filter(np.array([1.0, 1.0, 1.0, 100.0]))
assert m.tolist() == [True, True, True, False]
m2 = robust_filter(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
assert m2.all()
print("robust_filter frozen cases ok")

# ---- RANSAC + refine --------------------------------------------------------
pose_q = gt_poses[4]
uv_q, _ = project(intr_true, pose_q, pts_gt)
n_out = 30
uv_noisy = uv_q + rng.normal(0, 0.3, uv_q.shape)
out_sel = rng.choice(n_pts, n_out, replace=False)
uv_noisy[out_sel] += rng.uniform(30, 120, (n_out, 2)) * rng.choice([-1, 1], (n_out, 2))
init = gt_poses[3].copy()  # previous pose as init
pose_est, inl = estimate_pose_ransac(pts_gt, uv_noisy, intr_true, init, cfg, np.random.default_rng(3))
print("ransac inliers:", inl.sum(), "/", n_pts)
assert inl.sum() >= n_pts - n_out - 5
pose_ref = refine_pose(pose_est, pts_gt[inl], uv_noisy[inl], intr_true, cfg)
err_c = np.linalg.norm(pose_ref.camera_center() - pose_q.camera_center())
print("refined center error:", err_c)
assert err_c < 0.01

# degenerate: all outliers -> EstimationFailure
try:
    estimate_pose_ransac(pts_gt, uv_q + rng.uniform(50, 300, uv_q.shape),
                         intr_true, init, cfg, np.random.default_rng(0))
    print("FAIL: no EstimationFailure")
except EstimationFailure as ex:
    print("all-outlier ransac raises:", ex)

# ---- triangulation ----------------------------------------------------------
X_gt = np.array([0.2, -0.1, 0.3])
obs_px = [project(intr_true, p, X_gt[None])[0][0] for p in gt_poses[:4]]
X_tri = triangulate(gt_poses[:4], np.stack(obs_px), intr_true)
print("triangulation err:", np.linalg.norm(X_tri - X_gt))
assert np.linalg.norm(X_tri - X_gt) < 1e-9

# small-baseline failure
try:
    triangulate([gt_poses[0], gt_poses[0]], np.stack([obs_px[0], obs_px[0]]),
                intr_true)
    print("FAIL: no TriangulationFailure")
except TriangulationFailure as ex:
    print("degenerate triangulation raises:", ex)

# ---- rebootstrap check ------------------------------------------------------
stuck = np.zeros((25, 3)) + rng.normal(0, 1e-4, (25, 3))
moving = np.cumsum(rng.normal(0, 0.15, (25, 3)), axis=0)
assert rebootstrap_check(stuck) is True
assert rebootstrap_check(moving) is False
print("rebootstrap check ok")

# ---- align_bootstrap --------------------------------------------------------
# fabricate "new" bootstrap = similarity-transformed GT poses/points
s_t, R_t = 0.43, exp_so3(np.array([0.3, -0.2, 0.5]))
t_t = np.array([1.0, -2.0, 0.7])
# new world: X_new = R_t^T((X_old - t_t))/s_t  (i.e. old = s_t R_t X_new + t_t)
pts_new = (R_t.T @ ((pts_gt - t_t).T / s_t)).T
new_poses = []
for p in gt_poses:
    # camera frame must be preserved up to global scale:
    # p_cam_new = R_n X_new + t_n with R_n = R_old R_t, t_n chosen so projections match
    Rn = p.R @ R_t
    tn = (p.translation + p.R @ t_t) / s_t
    new_poses.append(Pose.from_matrix(Rn, tn))
obs = []
for ci in range(n_cam):
    for pi in range(0, n_pts, 7):
        obs.append((ci, pi, obs_uv[ci, pi, 0], obs_uv[ci, pi, 1]))
aligned, pts_al, err = align_bootstrap(new_poses, gt_poses, pts_new, obs, intr_true)
print("align err:", err)
assert err < 1e-6
assert np.max(np.abs(pts_al - pts_gt)) < 1e-9
for pa, pg in zip(aligned, gt_poses):
    assert np.max(np.abs(pa.R - pg.R)) < 1e-9

print("ALL MINIBA SMOKE CHECKS PASSED")
