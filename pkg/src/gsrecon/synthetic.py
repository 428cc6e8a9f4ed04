"""Synthetic scene generation and oracle problem builders.

Everything the test suite treats as ground truth originates here: randomized
Gaussian scenes rendered with the production renderer at f64, camera paths
(orbit / arc / corridor), dataset serialization, and seeded bundle-adjustment
and pose-estimation problems with known solutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .renderer import render
from .scene import ActiveSet, CameraIntrinsics, Pose, matrix_to_quat, project, quat_to_matrix

PATH_TYPES = ("orbit", "corridor", "arc")


@dataclass
class SynthSpec:
    """Parameters of a synthetic capture."""

    path: str = "orbit"
    n_frames: int = 30
    n_primitives: int = 200
    width: int = 128
    height: int = 128
    focal: float = 110.0
    radius: float = 2.0          # orbit/arc radius; also sets cluster size
    span_deg: float = 360.0      # orbit/arc angular coverage
    elevation: float = 0.35      # camera height above the cluster plane
    length: float = 6.0          # corridor path length
    tube_radius: float = 1.2     # corridor primitive cross-section

    def validate(self) -> None:
        if self.path not in PATH_TYPES:
            raise ValueError(f"unknown path type {self.path!r}; expected one of {PATH_TYPES}")
        for name in ("n_frames", "n_primitives", "width", "height"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("focal", "radius", "span_deg", "length", "tube_radius"):
            if float(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")


def parse_spec(text: str) -> SynthSpec:
    """Flat key=value lines; '#' starts a comment; unknown keys error."""
    spec = SynthSpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(spec, key):
            raise ValueError(f"line {lineno}: unknown spec key {key!r}")
        cur = getattr(spec, key)
        if isinstance(cur, str):
            setattr(spec, key, val)
        elif isinstance(cur, int):
            setattr(spec, key, int(val))
        else:
            setattr(spec, key, float(val))
    spec.validate()
    return spec


def load_spec(path: str | Path) -> SynthSpec:
    return parse_spec(Path(path).read_text())


def look_at(center: np.ndarray, target: np.ndarray,
            up: np.ndarray | None = None) -> Pose:
    """Camera-from-world pose with +z forward, +y down, looking at target."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return Pose.from_matrix(R, -R @ center)


def camera_path(spec: SynthSpec) -> list[Pose]:
    n = spec.n_frames
    if spec.path in ("orbit", "arc"):
        span = np.deg2rad(spec.span_deg)
        if spec.path == "orbit" and abs(spec.span_deg - 360.0) < 1e-9:
            angles = span * np.arange(n) / n          # closed loop, no repeat
        else:
            angles = span * np.arange(n) / max(n - 1, 1)
        poses = []
        for a in angles:
            c = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a),
                          spec.elevation])
            poses.append(look_at(c, np.zeros(3)))
        return poses
    # corridor: translate along +x, looking forward down the axis
    step = spec.length / max(n - 1, 1)
    poses = []
    for i in range(n):
        c = np.array([i * step, 0.0, 0.0])
        poses.append(look_at(c, c + np.array([spec.length, 0.0, 0.0]),
                             up=np.array([0.0, 0.0, 1.0])))
    return poses


def ground_truth_primitives(rng: np.random.Generator, spec: SynthSpec) -> ActiveSet:
    """Randomized opaque anisotropic Gaussians filling the capture volume."""
    n = spec.n_primitives
    if spec.path in ("orbit", "arc"):
        # rejection-free ball sampling: directions x radii^(1/3)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rad = 0.55 * spec.radius * rng.random(n) ** (1.0 / 3.0)
        pos = dirs * rad[:, None]
        base = 0.020 * spec.radius
    else:
        x = rng.random(n) * (spec.length + 2.0 * spec.tube_radius)
        yz = (rng.random((n, 2)) - 0.5) * 2.0 * spec.tube_radius
        keep = np.abs(yz[:, 1]) + np.abs(yz[:, 0]) > 0.25 * spec.tube_radius
        pos = np.stack([x, yz[:, 0], yz[:, 1]], axis=-1)
        pos[~keep, 1] += np.sign(yz[~keep, 0] + 1e-9) * 0.3 * spec.tube_radius
        base = 0.030 * spec.tube_radius
    # per-primitive size spread with mild per-axis anisotropy: compact,
    # view-stable blobs that still exercise oriented covariances
    size = base * np.exp(rng.uniform(-0.5, 0.7, size=(n, 1)))
    scales = size * np.exp(rng.uniform(-0.15, 0.15, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats[quats[:, 0] < 0] *= -1.0
    opacity = rng.uniform(0.65, 0.95, size=n)
    colors = rng.uniform(0.08, 0.97, size=(n, 3))

    gt = ActiveSet()
    gt.append(pos, np.log(scales), quats, np.log(opacity / (1.0 - opacity)),
              colors, birth_index=0, intro_iter=0)
    return gt


@dataclass
class SynthScene:
    spec: SynthSpec
    splats: ActiveSet
    poses: list
    intr: CameraIntrinsics
    images: list                 # (H, W, 3) uint8 per frame


def quantize_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_scene(seed: int, spec: SynthSpec) -> SynthScene:
    """Render a ground-truth capture with the production renderer at f64."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C3]))
    splats = ground_truth_primitives(rng, spec)
    intr = CameraIntrinsics(focal=spec.focal, cx=spec.width / 2.0,
                            cy=spec.height / 2.0, width=spec.width,
                            height=spec.height)
    poses = camera_path(spec)
    images = [quantize_u8(render(splats, p, intr).color) for p in poses]
    return SynthScene(spec=spec, splats=splats, poses=poses, intr=intr,
                      images=images)


# ---------------------------------------------------------------------------
# dataset serialization


def save_image(path: str | Path, img: np.ndarray) -> None:
    if img.dtype != np.uint8:
        img = quantize_u8(img)
    Image.fromarray(img, mode="RGB").save(str(path), format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB image as (H, W, 3) float64 in [0, 1]."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def pose_to_line(index: int, pose: Pose) -> str:
    """'index tx ty tz qx qy qz qw' with the camera-to-world transform."""
    inv = pose.inverse()
    q = matrix_to_quat(inv.R)                 # (w, x, y, z), w >= 0
    t = inv.translation
    vals = [t[0], t[1], t[2], q[1], q[2], q[3], q[0]]
    return " ".join([str(index)] + [f"{v:.17g}" for v in vals])


def pose_from_line(line: str) -> tuple[int, Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise ValueError(f"expected 8 fields in trajectory line, got {len(parts)}")
    index = int(parts[0])
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[1:])
    R_wc = quat_to_matrix(np.array([qw, qx, qy, qz]))
    world_from_cam = Pose.from_matrix(R_wc, np.array([tx, ty, tz]))
    return index, world_from_cam.inverse()


def save_trajectory(path: str | Path, indexed_poses: list) -> None:
    lines = [pose_to_line(i, p) for i, p in indexed_poses]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(pose_from_line(line))
    return out


def save_intrinsics(path: str | Path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(
        f"focal = {intr.focal:.17g}\ncx = {intr.cx:.17g}\ncy = {intr.cy:.17g}\n"
        f"width = {intr.width}\nheight = {intr.height}\n")


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    vals: dict = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = v
    return CameraIntrinsics(focal=float(vals["focal"]), cx=float(vals["cx"]),
                            cy=float(vals["cy"]), width=int(vals["width"]),
                            height=int(vals["height"]))


def write_dataset(scene: SynthScene, out_dir: str | Path) -> None:
    """frame_%04d.png + poses_gt.txt + intrinsics.txt, lexicographic order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(scene.images):
        save_image(out / f"frame_{i:04d}.png", img)
    save_trajectory(out / "poses_gt.txt",
                    [(i, p) for i, p in enumerate(scene.poses)])
    save_intrinsics(out / "intrinsics.txt", scene.intr)


def list_images(image_dir: str | Path) -> list:
    exts = {".png", ".bmp", ".ppm", ".tif", ".tiff"}
    paths = sorted(p for p in Path(image_dir).iterdir()
                   if p.suffix.lower() in exts)
    if not paths:
        raise FileNotFoundError(f"no raster images found in {image_dir}")
    return paths


# ---------------------------------------------------------------------------
# oracle problems with known solutions


def oracle_cameras(rng: np.random.Generator, n_cams: int, radius: float = 2.0,
                   span_deg: float = 70.0) -> list:
    """Cameras on a slightly jittered arc, all looking at the origin."""
    angles = np.deg2rad(span_deg) * np.arange(n_cams) / max(n_cams - 1, 1)
    poses = []
    for a in angles:
        c = np.array([radius * np.cos(a), radius * np.sin(a),
                      0.3 + 0.1 * rng.standard_normal()])
        poses.append(look_at(c, rng.standard_normal(3) * 0.02))
    return poses


def ba_problem(seed: int, n_cams: int = 8, n_points: int = 500,
               noise_px: float = 0.5, width: int = 640, height: int = 480,
               focal: float = 520.0) -> dict:
    """Seeded multi-view structure problem with Gaussian pixel noise.

    Returns observation arrays (every point seen by every camera) plus the
    generating ground truth.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA]))
    intr = CameraIntrinsics(focal=focal, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)
    poses = oracle_cameras(rng, n_cams)
    dirs = rng.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * (0.6 * rng.random(n_points) ** (1.0 / 3.0))[:, None]

    cam_idx, pt_idx, uv = [], [], []
    for ci, pose in enumerate(poses):
        px, _ = project(intr, pose, pts)
        cam_idx.append(np.full(n_points, ci, dtype=np.int64))
        pt_idx.append(np.arange(n_points, dtype=np.int64))
        uv.append(px)
    uv = np.concatenate(uv) + noise_px * rng.standard_normal((n_cams * n_points, 2))
    return dict(
        cam_idx=np.concatenate(cam_idx), pt_idx=np.concatenate(pt_idx), uv=uv,
        intr=intr, gt_poses=poses, gt_points=pts, gt_focal=focal,
        keypoints=[uv[i * n_points:(i + 1) * n_points] for i in range(n_cams)])


def exact_matcher_for(problem: dict):
    """Matcher stub for bootstrap oracles: descriptors are point indices."""
    def matcher(feat_a, feat_b):
        ids_a, ids_b = feat_a[1], feat_b[1]
        pos_b = {int(v): j for j, v in enumerate(ids_b)}
        ia, ib = [], []
        for i, v in enumerate(ids_a):
            j = pos_b.get(int(v))
            if j is not None:
                ia.append(i)
                ib.append(j)
        ia = np.array(ia, dtype=np.int64)
        ib = np.array(ib, dtype=np.int64)
        return ia, ib, np.zeros(len(ia))
    return matcher


def bootstrap_problem(seed: int, n_cams: int = 8, n_points: int = 500,
                      noise_px: float = 0.5) -> dict:
    """Feature-list form of ba_problem, consumable by the bootstrap path.

    Each synthetic frame sees a random ~70% subset of the points so tracks
    have varying length; 'descriptors' are ground-truth point ids, matched
    exactly.
    """
    prob = ba_problem(seed, n_cams=n_cams, n_points=n_points, noise_px=noise_px)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB5]))
    features = []
    for ci in range(n_cams):
        vis = np.nonzero(rng.random(n_points) < 0.7)[0]
        features.append((prob["keypoints"][ci][vis], vis))
    prob["features"] = features
    prob["matcher"] = exact_matcher_for(prob)
    span = np.ptp([p.camera_center() for p in prob["gt_poses"]], axis=0)
    prob["span"] = float(np.linalg.norm(span))
    return prob


def pnp_problem(seed: int, n: int = 160, outlier_frac: float = 0.3,
                noise_px: float = 0.5) -> dict:
    """2D-3D correspondences with a known pose and planted outliers."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E]))
    intr = CameraIntrinsics(focal=520.0, cx=320.0, cy=240.0, width=640,
                            height=480)
    pose = look_at(np.array([2.0, 0.4, 0.3]) + 0.2 * rng.standard_normal(3),
                   0.05 * rng.standard_normal(3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * (0.6 * rng.random(n) ** (1.0 / 3.0))[:, None]
    px, _ = project(intr, pose, pts)
    px = px + noise_px * rng.standard_normal((n, 2))
    n_out = int(round(outlier_frac * n))
    out_ids = rng.choice(n, size=n_out, replace=False)
    px[out_ids] = rng.random((n_out, 2)) * [intr.width, intr.height]
    inlier_mask = np.ones(n, dtype=bool)
    inlier_mask[out_ids] = False
    init = Pose.from_matrix(pose.R, pose.translation + 0.1 * rng.standard_normal(3))
    return dict(intr=intr, gt_pose=pose, points=pts, pixels=px,
                inlier_mask=inlier_mask, init_pose=init)
