"""Capture orchestration: ingestion, the incremental main loop, metrics, export.

run_capture consumes an ordered image sequence and produces an AnchorStore
plus a TrajectoryRecord. Per image: features -> keyframe gate -> (bootstrap |
incremental pose) -> primitive spawning -> joint optimization -> anchor
bookkeeping. Test-stride frames are force-registered for held-out evaluation
but never contribute gradients to primitives. Everything downstream of the
image bytes is deterministic given the configuration and seed.
"""
from __future__ import annotations

import dataclasses
import struct
import time
from pathlib import Path

import numpy as np

from .anchors import (AnchorStore, anchor_trigger, create_anchor, fine_mask,
                      merge_fine, select_anchors)
from .config import CaptureConfig
from .frontend import (detect_and_describe, hamming_distances, keyframe_gate,
                       load_features, match)
from .miniba import (AlignmentRejected, BootstrapFailure, EstimationFailure,
                     TriangulationFailure, align_bootstrap, bootstrap,
                     default_matcher, estimate_pose_ransac, rebootstrap_check,
                     refine_pose, triangulate)
from .optimizer import (cull, optimize_after_keyframe, refine_pose_photometric,
                        PoseAdam)
from .renderer import render
from .sampler import (bilinear, expected_nn_scale, log_norm_map, scale_to_3d,
                      spawn_for_keyframe, spawn_gaussians)
from .scene import (ActiveSet, CameraIntrinsics, Keyframe, Pose, TrackTable,
                    matrix_to_quat, project, quat_to_matrix, unproject)
from .frontend import rgb_to_gray
from .synthetic import list_images, load_image, pose_from_line, pose_to_line

TRAJECTORY_NAME = "trajectory.txt"
POINTS_MAGIC = b"OTFPC1\x00\x00"

GUIDED_RADIUS_FRAC = 0.10    # search window for guided association, x width
GUIDED_HAMMING_MAX = 80      # absolute descriptor gate for guided matches


class CaptureError(RuntimeError):
    """Unrecoverable capture failure (bootstrap exhausted, too few frames)."""


@dataclasses.dataclass
class TrajectoryRecord:
    """Registered keyframes: index, timestamp (defaults to index), pose."""

    indices: list = dataclasses.field(default_factory=list)
    timestamps: list = dataclasses.field(default_factory=list)
    poses: list = dataclasses.field(default_factory=list)

    def append(self, index: int, pose: Pose, timestamp: float | None = None):
        if self.indices and index <= self.indices[-1]:
            raise ValueError(
                f"keyframe index {index} not increasing past {self.indices[-1]}")
        self.indices.append(int(index))
        self.timestamps.append(float(index) if timestamp is None else timestamp)
        self.poses.append(pose)

    def __len__(self) -> int:
        return len(self.indices)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for idx, pose in zip(self.indices, self.poses):
                f.write(pose_to_line(idx, pose) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryRecord":
        rec = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                idx, pose = pose_from_line(line)
                rec.append(idx, pose)
        return rec


def _to_gray(image: np.ndarray) -> np.ndarray:
    return rgb_to_gray(image)


class _Capture:
    """Mutable state of one incremental run."""

    def __init__(self, cfg: CaptureConfig, intr: CameraIntrinsics):
        self.cfg = cfg
        self.intr = intr
        self.rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xCA9]))
        self.active = ActiveSet()
        self.table = TrackTable(cfg.n_obs_max)
        self.keyframes: dict[int, Keyframe] = {}
        self.order: list[int] = []          # registered keyframe indices
        self.traj = TrajectoryRecord()
        self.store = AnchorStore()
        self.pose_opts: dict[int, PoseAdam] = {}
        self.bootstrapped = False
        self.window: list[Keyframe] = []    # pre-bootstrap candidates
        self.anchor_kf_ids: list[int] = []  # keyframes since last anchor cut
        self.next_anchor_id = 0
        self.intro_iter = 0                 # total training iterations so far
        self.last_kf: Keyframe | None = None

    # -- registration ------------------------------------------------------

    def register(self, kf: Keyframe) -> None:
        self.keyframes[kf.index] = kf
        self.order.append(kf.index)
        self.traj.append(kf.index, kf.pose)
        self.pose_opts[kf.index] = PoseAdam(self.cfg.lr_pose)
        self.anchor_kf_ids.append(kf.index)
        self.last_kf = kf

    def train_ids(self) -> list:
        return [i for i in self.order if not self.keyframes[i].is_test]

    # -- spawning + optimization duties shared by all keyframes -------------

    def spawn_and_optimize(self, kf: Keyframe, new_points: np.ndarray,
                           new_pixels: np.ndarray) -> None:
        """Primitive spawning and the joint optimization pass for one
        registered non-test keyframe.

        new_points/new_pixels: world points triangulated while registering
        this keyframe and their pixels in it; each gets one primitive.
        """
        cfg, intr = self.cfg, self.intr
        out = render(self.active, kf.pose, intr, near=cfg.near_plane)
        depth = out.depth if len(self.active) else None
        valid = out.valid_depth if len(self.active) else None

        if len(new_points):
            p_img = log_norm_map(kf.image, cfg.sampler_sigma)
            p_l = bilinear(p_img, new_pixels[:, 0], new_pixels[:, 1])
            s_px = expected_nn_scale(p_l, cfg.sampler_prob_floor)
            cam_d = np.linalg.norm(new_points - kf.pose.camera_center(),
                                   axis=1)
            s_3d = scale_to_3d(s_px, cam_d, intr.focal)
            col = np.stack([bilinear(kf.image[..., c], new_pixels[:, 0],
                                     new_pixels[:, 1]) for c in range(3)],
                           axis=-1)
            spawn_gaussians(self.active, new_points, np.clip(col, 0.0, 1.0),
                            s_3d, kf.index, self.intro_iter,
                            cfg.spawn_opacity)

        track_px, track_pts, _ = self.table.points_in_frame(kf.index)
        if len(track_pts):
            cam = kf.pose.transform(track_pts)
            track_depths = cam[:, 2]
            ok = track_depths > cfg.near_plane
            track_px, track_depths = track_px[ok], track_depths[ok]
        else:
            track_depths = np.zeros(0)
        prev = None
        train = [i for i in self.train_ids() if i != kf.index]
        if train:
            prev = self.keyframes[train[-1]]
        spawn_for_keyframe(
            self.active, kf.image, out.color, _to_gray(kf.image),
            None if prev is None else _to_gray(prev.image),
            kf.pose, None if prev is None else prev.pose, intr,
            track_px, track_depths, self.rng, cfg,
            birth_index=kf.index, intro_iter=self.intro_iter,
            rendered_depth=depth, rendered_valid=valid)

        if len(self.active) == 0:
            return
        optimize_after_keyframe(
            self.active, self.keyframes, kf.index, intr, cfg,
            self.pose_opts, self.rng, train)
        self.intro_iter += cfg.iterations
        self.refresh_pose(kf)
        cull(self.active, cfg.cull_opacity)

    def refresh_pose(self, kf: Keyframe) -> None:
        self.traj.poses[self.traj.indices.index(kf.index)] = kf.pose

    # -- anchors -------------------------------------------------------------

    def anchor_check(self) -> None:
        cfg = self.cfg
        if not cfg.anchors_enabled or len(self.order) < 2:
            return
        prev_center = self.keyframes[self.order[-2]].pose.camera_center()
        if not anchor_trigger(self.active, prev_center, self.intr.focal,
                              cfg.tau_min, cfg.trigger_fraction):
            return
        self.cut_anchor(prev_center)

    def cut_anchor(self, camera_center: np.ndarray) -> None:
        cfg = self.cfg
        centers = np.stack([self.keyframes[i].pose.camera_center()
                            for i in self.anchor_kf_ids])
        anchor = create_anchor(self.next_anchor_id, self.active,
                               self.anchor_kf_ids, centers.mean(axis=0))
        self.store.add(anchor)
        self.next_anchor_id += 1
        self.anchor_kf_ids = []
        fine = fine_mask(self.active, camera_center, self.intr.focal,
                         cfg.tau_min)
        merge_fine(self.active, fine, self.rng, cfg.merge_k,
                   birth_index=self.order[-1], intro_iter=self.intro_iter)
        self.active.reissue_ids()

    def finalize(self) -> None:
        if self.anchor_kf_ids and (len(self.active) or not self.store.anchors):
            centers = np.stack([self.keyframes[i].pose.camera_center()
                                for i in self.anchor_kf_ids])
            anchor = create_anchor(self.next_anchor_id, self.active,
                                   self.anchor_kf_ids, centers.mean(axis=0))
            self.store.add(anchor)
            self.next_anchor_id += 1
            self.anchor_kf_ids = []


def _correspondences(cap: _Capture, kf: Keyframe):
    """3D-2D correspondences of a new frame against recent keyframes.

    Matches the new frame's descriptors to the last n_obs_max registered
    keyframes. Each matched keypoint of a past frame contributes its track
    point when one exists; otherwise its track is triangulated from the
    known past poses, falling back to that frame's rendered depth. Returns
    (points3d, pixels, provenance) where provenance tags each row with
    (past_frame, past_kp, new_kp).
    """
    cfg, intr = cap.cfg, cap.intr
    recent = cap.order[-cfg.n_obs_max:]
    pts, px, prov = [], [], []
    depth_cache: dict[int, tuple] = {}
    for f in recent:
        old = cap.keyframes[f]
        ia, ib, _ = default_matcher((old.keypoints, old.descriptors),
                                    (kf.keypoints, kf.descriptors))
        for a, b in zip(ia, ib):
            a, b = int(a), int(b)
            point = None
            tid = cap.table.track_of(f, a)
            if tid is not None:
                tr = cap.table.tracks[tid]
                if tr.point is not None:
                    point = tr.point
                else:
                    obs = tr.obs
                    poses = [cap.keyframes[fr].pose for fr, _, _, _ in obs
                             if fr in cap.keyframes]
                    uv = np.array([(x, y) for fr, _, x, y in obs
                                   if fr in cap.keyframes])
                    if len(poses) >= 2:
                        try:
                            point = triangulate(poses, uv, intr,
                                                cfg.tri_max_reproj_px,
                                                cfg.tri_min_angle_deg)
                            tr.point = point
                        except TriangulationFailure:
                            point = None
            if point is None:
                if f not in depth_cache:
                    out = render(cap.active, old.pose, intr,
                                 near=cfg.near_plane)
                    depth_cache[f] = (out.depth, out.valid_depth)
                dmap, vmap = depth_cache[f]
                u, v = old.keypoints[a]
                ui, vi = int(round(u)), int(round(v))
                ui = min(max(ui, 0), intr.width - 1)
                vi = min(max(vi, 0), intr.height - 1)
                if not vmap[vi, ui]:
                    continue
                point = unproject(intr, old.pose,
                                  np.array([[u, v]]),
                                  np.array([dmap[vi, ui]]))[0]
            pts.append(point)
            px.append(kf.keypoints[b])
            prov.append((f, a, b))
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 2)), []
    return np.stack(pts), np.stack(px), prov


def _guided_rows(cap: _Capture, kf: Keyframe, pose: Pose, prov: list):
    """Guided association of map points against a coarse pose estimate.

    Point-bearing tracks the descriptor matcher missed are projected into the
    new frame through the coarse pose; each claims the Hamming-nearest
    keypoint inside a small window. The claims re-enter the consensus vote,
    so the map geometry outvotes rendered-depth fallbacks once the pose is
    roughly known. Returns extra (points3d, pixels, provenance) rows.
    """
    intr = cap.intr
    claimed = set()
    for f, a, _ in prov:
        tid = cap.table.track_of(f, a)
        if tid is not None:
            claimed.add(tid)
    cand = []
    for tid, tr in cap.table.tracks.items():
        if tr.point is None or tid in claimed:
            continue
        fr, a = tr.obs[-1][0], tr.obs[-1][1]
        if fr in cap.keyframes:
            cand.append((tr.point, fr, a))
    if not cand or not len(kf.keypoints):
        return np.zeros((0, 3)), np.zeros((0, 2)), []
    world = np.stack([c[0] for c in cand])
    proj, in_front = project(intr, pose, world)
    descs = np.stack([cap.keyframes[fr].descriptors[a] for _, fr, a in cand])
    ham = hamming_distances(descs, kf.descriptors)
    d2 = ((proj[:, None, :] - kf.keypoints[None, :, :]) ** 2).sum(axis=-1)
    radius = GUIDED_RADIUS_FRAC * intr.width
    with np.errstate(invalid="ignore"):
        ham = np.where(d2 <= radius * radius, ham, 10 ** 6)
    best = ham.argmin(axis=1)
    dist = ham[np.arange(len(cand)), best]
    pts, px, rows = [], [], []
    for i in np.nonzero(in_front & (dist <= GUIDED_HAMMING_MAX))[0]:
        _, fr, a = cand[i]
        b = int(best[i])
        pts.append(world[i])
        px.append(kf.keypoints[b])
        rows.append((fr, a, b))
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 2)), []
    return np.stack(pts), np.stack(px), rows


def _extend_tracks(cap: _Capture, kf: Keyframe, prov: list,
                   inlier_rows: np.ndarray):
    """Fold this frame's inlier matches into the track table.

    Extends existing tracks, opens two-observation tracks for new pairs, and
    (re)triangulates tracks that gained an observation. Returns the world
    points triangulated here and their pixels in the new frame (one future
    primitive each).
    """
    cfg, intr = cap.cfg, cap.intr
    new_pts, new_px = [], []
    seen_new_kp: set = set()
    touched: list = []
    for row in np.nonzero(inlier_rows)[0]:
        f, a, b = prov[row]
        if b in seen_new_kp or cap.table.track_of(kf.index, b) is not None:
            continue
        x, y = float(kf.keypoints[b][0]), float(kf.keypoints[b][1])
        tid = cap.table.track_of(f, a)
        if tid is not None:
            cap.table.add_observation(tid, kf.index, b, x, y)
        else:
            ox, oy = cap.keyframes[f].keypoints[a]
            tid = cap.table.new_track([(f, a, float(ox), float(oy)),
                                       (kf.index, b, x, y)])
        seen_new_kp.add(b)
        touched.append((tid, x, y))

    for tid, x, y in touched:
        tr = cap.table.tracks[tid]
        if tr.point is not None:
            continue
        poses = [cap.keyframes[fr].pose for fr, _, _, _ in tr.obs
                 if fr in cap.keyframes]
        uv = np.array([(px_, py_) for fr, _, px_, py_ in tr.obs
                       if fr in cap.keyframes])
        if len(poses) < 2:
            continue
        try:
            tr.point = triangulate(poses, uv, intr, cfg.tri_max_reproj_px,
                                   cfg.tri_min_angle_deg)
        except TriangulationFailure:
            continue
        new_pts.append(tr.point)
        new_px.append((x, y))
    if not new_pts:
        return np.zeros((0, 3)), np.zeros((0, 2))
    return np.stack(new_pts), np.array(new_px)


def _try_bootstrap(cap: _Capture) -> bool:
    """Attempt bootstrap on the current candidate window.

    On success registers every window frame as a keyframe and runs the
    spawn/optimize pass for each (skipping primitive work on test frames).
    On failure drops the oldest candidate so the window slides.
    """
    cfg = cap.cfg
    feats = [(k.keypoints, k.descriptors) for k in cap.window]
    try:
        poses, intr_out, table, info = bootstrap(feats, cap.intr, cfg)
    except BootstrapFailure:
        cap.window.pop(0)
        return False

    cap.intr = intr_out
    # bootstrap track table uses window-local frame numbers; remap
    remap = {i: k.index for i, k in enumerate(cap.window)}
    cap.table = TrackTable(cfg.n_obs_max)
    for tr in table.tracks.values():
        obs = [(remap[fr], kp, x, y) for fr, kp, x, y in tr.obs]
        tid = cap.table.new_track(obs, point=tr.point)
    for kf, pose in zip(cap.window, poses):
        kf.pose = pose
        cap.register(kf)
    for kf in cap.window:
        if not kf.is_test:
            cap.spawn_and_optimize(kf, np.zeros((0, 3)), np.zeros((0, 2)))
    cap.window = []
    cap.bootstrapped = True
    return True


def _rebootstrap(cap: _Capture) -> None:
    """Re-run bootstrap over the last n_init keyframes with frozen focal and
    fold it in only when it aligns to the existing trajectory within the
    pixel gate."""
    cfg = cap.cfg
    recent = cap.order[-cfg.n_init:]
    if len(recent) < cfg.n_init:
        return
    kfs = [cap.keyframes[i] for i in recent]
    feats = [(k.keypoints, k.descriptors) for k in kfs]
    try:
        poses, _, table, _ = bootstrap(feats, cap.intr, cfg,
                                       optimize_focal=False)
    except BootstrapFailure:
        return
    pts, obs = [], []
    for tr in table.tracks.values():
        if tr.point is None:
            continue
        j = len(pts)
        pts.append(tr.point)
        for fr, _, x, y in tr.obs:
            obs.append((fr, j, x, y))
    if not pts:
        return
    try:
        aligned_poses, aligned_pts, _ = align_bootstrap(
            poses, [k.pose for k in kfs], np.stack(pts), obs, cap.intr,
            cfg.align_max_px)
    except AlignmentRejected:
        return
    for kf, pose in zip(kfs, aligned_poses):
        kf.pose = pose
        cap.refresh_pose(kf)
    cap.table = TrackTable(cfg.n_obs_max)
    j = 0
    for tr in table.tracks.values():
        if tr.point is None:
            continue
        remapped = [(recent[fr], kp, x, y) for fr, kp, x, y in tr.obs]
        cap.table.new_track(remapped, point=aligned_pts[j])
        j += 1


def run_capture(images, cfg: CaptureConfig | None = None,
                intr: CameraIntrinsics | None = None,
                features: list | None = None,
                out_dir: str | Path | None = None):
    """Incremental reconstruction over an ordered image sequence.

    images: list of HxWx3 float arrays in [0, 1] (or paths). features, when
    given, replaces detection (one (keypoints, descriptors, responses) tuple
    per frame). Returns (AnchorStore, TrajectoryRecord, info dict). When
    out_dir is given, the model files are serialized there on completion.
    """
    cfg = cfg or CaptureConfig()
    imgs = [load_image(p) if isinstance(p, (str, Path)) else
            np.asarray(p, dtype=np.float64) for p in images]
    if len(imgs) < cfg.n_init:
        raise CaptureError(
            f"{len(imgs)} images < n_init={cfg.n_init}; nothing to bootstrap")
    h, w = imgs[0].shape[:2]
    if intr is None:
        intr = CameraIntrinsics(cfg.focal_init_factor * w, w / 2.0, h / 2.0,
                                w, h)

    cap = _Capture(cfg, intr)
    t0 = time.time()
    n_skipped = 0
    for i, image in enumerate(imgs):
        if features is not None:
            kps, desc, resp = features[i][:3]
        else:
            kps, desc, resp = detect_and_describe(image)
        is_test = cfg.test_stride > 0 and i % cfg.test_stride == 0
        kf = Keyframe(index=i, image=image, keypoints=kps, descriptors=desc,
                      responses=resp, is_test=is_test)

        if not cap.bootstrapped:
            accept = True
            if cap.window and not is_test:
                ref = cap.window[-1]
                ia, ib, _ = match(ref.descriptors, kf.descriptors)
                disp = np.linalg.norm(kf.keypoints[ib] - ref.keypoints[ia],
                                      axis=1) if len(ia) else np.zeros(0)
                accept = keyframe_gate(disp, w, cfg.keyframe_threshold,
                                       cfg.min_gate_matches)
            if accept:
                cap.window.append(kf)
            if len(cap.window) == cfg.n_init:
                _try_bootstrap(cap)
            continue

        ref = cap.last_kf
        ia, ib, _ = match(ref.descriptors, kf.descriptors)
        disp = np.linalg.norm(kf.keypoints[ib] - ref.keypoints[ia], axis=1) \
            if len(ia) else np.zeros(0)
        if not is_test and not keyframe_gate(disp, w, cfg.keyframe_threshold,
                                             cfg.min_gate_matches):
            n_skipped += 1
            continue

        def solve():
            pts3d, px2d, prov = _correspondences(cap, kf)
            pose, inl = estimate_pose_ransac(pts3d, px2d, cap.intr, ref.pose,
                                             cfg, cap.rng)
            gp, gx, grows = _guided_rows(cap, kf, pose, prov)
            if len(grows):
                allp = np.vstack([pts3d, gp])
                allx = np.vstack([px2d, gx])
                # guided rows are speculative, so the re-vote is held to the
                # absolute support bar of the descriptor stage rather than a
                # fraction of the flooded candidate set; a failed re-vote
                # keeps the descriptor-stage pose
                bar = max(int(np.ceil(cfg.ransac_min_inlier_ratio
                                      * len(prov))), int(inl.sum()))
                cfg2 = dataclasses.replace(
                    cfg, ransac_min_inlier_ratio=bar / len(allp))
                try:
                    pose, inl = estimate_pose_ransac(allp, allx, cap.intr,
                                                     pose, cfg2, cap.rng)
                    pts3d, px2d, prov = allp, allx, prov + grows
                except EstimationFailure:
                    pass
            if int(inl.sum()) >= 6:
                pose = refine_pose(pose, pts3d[inl], px2d[inl], cap.intr, cfg)
            return pose, inl, pts3d, px2d, prov

        try:
            pose, inliers, pts3d, px2d, prov = solve()
        except EstimationFailure:
            _rebootstrap(cap)
            try:
                pose, inliers, pts3d, px2d, prov = solve()
            except EstimationFailure:
                n_skipped += 1
                continue

        kf.pose = pose
        cap.register(kf)
        new_pts, new_px = _extend_tracks(cap, kf, prov, inliers)
        if not is_test:
            cap.spawn_and_optimize(kf, new_pts, new_px)
            cap.anchor_check()

        centers = np.stack([cap.keyframes[j].pose.camera_center()
                            for j in cap.order])
        if rebootstrap_check(centers, cfg.rebootstrap_window,
                             cfg.rebootstrap_min_dist):
            _rebootstrap(cap)

    if not cap.bootstrapped:
        raise CaptureError(
            "bootstrap failed on every candidate window; sequence exhausted "
            f"({len(imgs)} frames, window {len(cap.window)} candidates left)")

    cap.finalize()
    info = dict(n_keyframes=len(cap.order), n_skipped=n_skipped,
                n_anchors=len(cap.store), n_active=len(cap.active),
                focal=cap.intr.focal, wall_time=time.time() - t0,
                test_ids=[i for i in cap.order
                          if cap.keyframes[i].is_test],
                keyframes=cap.keyframes)
    if out_dir is not None:
        export_model(cap.store, cap.traj, out_dir, cap.intr)
    return cap.store, cap.traj, info


# ---------------------------------------------------------------------------
# evaluation


def psnr(pred: np.ndarray, target: np.ndarray, cap_db: float = 100.0) -> float:
    """10*log10(1/MSE) on [0, 1] images, capped at cap_db for exact matches."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64)
                         - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 10.0 ** (-cap_db / 10.0):
        return cap_db
    return 10.0 * np.log10(1.0 / mse)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), standard
    constants, averaged over channels."""
    from .frontend import gaussian_blur

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 2:
        p, t = p[..., None], t[..., None]

    def blur(img):
        return np.stack([gaussian_blur(img[..., c], 1.5)
                         for c in range(img.shape[-1])], axis=-1)

    mu_p, mu_t = blur(p), blur(t)
    var_p = blur(p * p) - mu_p ** 2
    var_t = blur(t * t) - mu_t ** 2
    cov = blur(p * t) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def eval_nvs(store: AnchorStore, views: list, intr: CameraIntrinsics,
             cfg: CaptureConfig | None = None,
             refine_iters: int = 0) -> dict:
    """Held-out novel-view quality.

    views: [(pose, image)] pairs. When refine_iters > 0 each test pose is
    first refined photometrically against the blended render (test poses come
    from tracking only and carry its error; the photometric alignment is part
    of the evaluation protocol, not training - primitives stay fixed).
    Returns per-view and mean PSNR/SSIM.
    """
    cfg = cfg or CaptureConfig()
    rows = []
    for pose, image in views:
        if refine_iters > 0:
            splats = _nearest_anchor_set(store, pose)
            pose = refine_pose_photometric(pose, splats, image, intr, cfg,
                                           iters=refine_iters)
        pred = render_novel_view(store, pose, intr, cfg.blend_overlap,
                                 near=cfg.near_plane)
        rows.append((psnr(pred, image), ssim(pred, image)))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return dict(psnr=[r[0] for r in rows], ssim=[r[1] for r in rows],
                mean_psnr=float(arr[:, 0].mean()) if len(rows) else 0.0,
                mean_ssim=float(arr[:, 1].mean()) if len(rows) else 0.0)


def eval_trajectory(est: TrajectoryRecord, gt: TrajectoryRecord) -> dict:
    """RMSE APE after closed-form similarity alignment, plus consecutive-pair
    RPE, for the keyframe indices the two trajectories share."""
    from .scene import umeyama

    common = [i for i in est.indices if i in set(gt.indices)]
    if len(common) < 2:
        raise ValueError("need >= 2 shared poses to evaluate a trajectory")
    e_by = dict(zip(est.indices, est.poses))
    g_by = dict(zip(gt.indices, gt.poses))
    e_c = np.stack([e_by[i].camera_center() for i in common])
    g_c = np.stack([g_by[i].camera_center() for i in common])
    s, R, t = umeyama(e_c, g_c, with_scale=True)
    e_al = s * e_c @ R.T + t
    ape = float(np.sqrt(np.mean(np.sum((e_al - g_c) ** 2, axis=1))))

    # rotation APE after the alignment rotation
    rot_errs = []
    for i in common:
        Re = R @ e_by[i].R.T            # world-to-cam -> cam-to-world basis
        Rg = g_by[i].R.T
        cosang = (np.trace(Rg.T @ Re) - 1.0) / 2.0
        rot_errs.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    ape_rot = float(np.sqrt(np.mean(np.square(rot_errs))))

    # RPE over consecutive shared keyframes on the aligned trajectory
    d_e = np.diff(e_al, axis=0)
    d_g = np.diff(g_c, axis=0)
    rpe = float(np.sqrt(np.mean(np.sum((d_e - d_g) ** 2, axis=1))))
    rpe_rots = []
    for a, b in zip(common[:-1], common[1:]):
        de = e_by[b].R @ e_by[a].R.T
        dg = g_by[b].R @ g_by[a].R.T
        cosang = (np.trace(dg.T @ de) - 1.0) / 2.0
        rpe_rots.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    rpe_rot = float(np.sqrt(np.mean(np.square(rpe_rots))))
    return dict(ape=ape, ape_rot_deg=ape_rot, rpe=rpe, rpe_rot_deg=rpe_rot,
                scale=float(s), n=len(common))


# ---------------------------------------------------------------------------
# model files


def export_model(store: AnchorStore, traj: TrajectoryRecord,
                 out_dir: str | Path,
                 intr: CameraIntrinsics | None = None) -> dict:
    """Serialize a finished capture: trajectory text, per-anchor files, and
    per-anchor point-cloud files (anchor layout minus optimizer state)."""
    if len(store) == 0:
        raise ValueError("empty anchor store; nothing to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj.save(out / TRAJECTORY_NAME)
    anchor_paths = store.save(out)
    pc_paths = []
    for a in store.anchors:
        p = out / f"points_{a.id:04d}.bin"
        save_point_cloud(p, a)
        pc_paths.append(p)
    if intr is not None:
        from .synthetic import save_intrinsics
        save_intrinsics(out / "intrinsics.txt", intr)
    return dict(trajectory=out / TRAJECTORY_NAME, anchors=anchor_paths,
                point_clouds=pc_paths)


def save_point_cloud(path: str | Path, anchor) -> None:
    """Anchor primitives without optimizer state.

    Layout: magic, anchor id (u32), count (u32), then per primitive
    position 3xf32, log_scale 3xf32, quaternion 4xf32, opacity_logit f32,
    color 3xf32 - field order mirroring the anchor file.
    """
    n = len(anchor.positions)
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<II", anchor.id, n))
        payload = np.concatenate([
            anchor.positions.astype(np.float32),
            anchor.log_scales.astype(np.float32),
            anchor.rotations.astype(np.float32),
            anchor.opacity_logits.astype(np.float32)[:, None],
            anchor.colors.astype(np.float32),
        ], axis=1)
        f.write(payload.astype("<f4").tobytes())


def load_point_cloud(path: str | Path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != POINTS_MAGIC:
            raise ValueError(f"bad point-cloud magic {magic!r}")
        anchor_id, n = struct.unpack("<II", f.read(8))
        flat = np.frombuffer(f.read(n * 14 * 4), dtype="<f4")
        if flat.size != n * 14:
            raise ValueError("truncated point-cloud file")
    rows = flat.reshape(n, 14)
    return dict(id=anchor_id, positions=rows[:, 0:3].copy(),
                log_scales=rows[:, 3:6].copy(), rotations=rows[:, 6:10].copy(),
                opacity_logits=rows[:, 10].copy(), colors=rows[:, 11:14].copy())


# ---------------------------------------------------------------------------
# novel views


def _anchor_active(anchor) -> ActiveSet:
    s = ActiveSet()
    s.append(anchor.positions.astype(np.float64),
             anchor.log_scales.astype(np.float64),
             anchor.rotations.astype(np.float64),
             anchor.opacity_logits.astype(np.float64),
             anchor.colors.astype(np.float64), 0, 0)
    return s


def _nearest_anchor_set(store: AnchorStore, pose: Pose) -> ActiveSet:
    sel = select_anchors(pose.camera_center(), store.locations())
    return _anchor_active(store.anchors[sel[0][0]])


def render_novel_view(store: AnchorStore, pose: Pose, intr: CameraIntrinsics,
                      overlap: float = 0.1, near: float = 0.01) -> np.ndarray:
    """Blend per-anchor renders by anchor weight (image-space compositing).

    With a single selected anchor this is exactly the plain render of its
    primitives.
    """
    if len(store) == 0:
        raise ValueError("empty anchor store")
    sel = select_anchors(pose.camera_center(), store.locations(), overlap)
    out = np.zeros((intr.height, intr.width, 3))
    for idx, weight in sel:
        if weight == 0.0:
            continue
        img = render(_anchor_active(store.anchors[idx]), pose, intr,
                     near=near).color
        out += weight * img
    return out
