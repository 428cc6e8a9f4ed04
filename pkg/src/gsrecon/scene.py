"""Core scene types and camera geometry: rotations, poses, projection, primitives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# rotations


def rotation6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into the first two columns of a rotation.

    Input (..., 6); output (..., 3, 3) with orthonormal columns, det +1.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    c1 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    u = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    c2 = u / np.linalg.norm(u, axis=-1, keepdims=True)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def matrix_to_rotation6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rotation6d_vjp(r6: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backprop dL/dR (3,3) to dL/dr6 (6,) through the Gram-Schmidt map."""
    r6 = np.asarray(r6, dtype=np.float64)
    a = r6[0:3]
    b = r6[3:6]
    na = np.linalg.norm(a)
    c1 = a / na
    proj = c1 @ b
    u = b - proj * c1
    nu = np.linalg.norm(u)
    c2 = u / nu

    g1 = dR[:, 0].copy()
    g2 = dR[:, 1].copy()
    g3 = dR[:, 2]

    # c3 = c1 x c2
    g1 += np.cross(c2, g3)
    g2 += np.cross(g3, c1)

    # c2 = u / |u|
    du = (g2 - c2 * (c2 @ g2)) / nu
    # u = b - (c1.b) c1
    db = du - c1 * (c1 @ du)
    g1 += -b * (c1 @ du) - proj * du

    # c1 = a / |a|
    da = (g1 - c1 * (c1 @ g1)) / na
    return np.concatenate([da, db])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit-normalized quaternion (w, x, y, z) to rotation matrix. Input (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backprop dL/dR (..., 3, 3) to dL/dq (..., 4) incl. the normalization."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]

    g = dR
    # dR/dw etc. for the normalized quaternion
    dw = (-2 * z * g[..., 0, 1] + 2 * y * g[..., 0, 2]
          + 2 * z * g[..., 1, 0] - 2 * x * g[..., 1, 2]
          - 2 * y * g[..., 2, 0] + 2 * x * g[..., 2, 1])
    dx = (2 * y * g[..., 0, 1] + 2 * z * g[..., 0, 2]
          + 2 * y * g[..., 1, 0] - 4 * x * g[..., 1, 1] - 2 * w * g[..., 1, 2]
          + 2 * z * g[..., 2, 0] + 2 * w * g[..., 2, 1] - 4 * x * g[..., 2, 2])
    dy = (-4 * y * g[..., 0, 0] + 2 * x * g[..., 0, 1] + 2 * w * g[..., 0, 2]
          + 2 * x * g[..., 1, 0] + 2 * z * g[..., 1, 2]
          - 2 * w * g[..., 2, 0] + 2 * z * g[..., 2, 1] - 4 * y * g[..., 2, 2])
    dz = (-4 * z * g[..., 0, 0] - 2 * w * g[..., 0, 1] + 2 * x * g[..., 0, 2]
          + 2 * w * g[..., 1, 0] - 4 * z * g[..., 1, 1] + 2 * y * g[..., 1, 2]
          + 2 * x * g[..., 2, 0] + 2 * y * g[..., 2, 1])
    dqh = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    return (dqh - qh * np.sum(qh * dqh, axis=-1, keepdims=True)) / n


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], 0],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1],
         R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues: axis-angle 3-vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    if th < 1e-12:
        W = skew(w)
        return np.eye(3) + W + 0.5 * (W @ W)
    k = w / th
    K = skew(k)
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# camera model


@dataclass
class CameraIntrinsics:
    """Pinhole camera with a single shared focal (fx == fy)."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics for rendering at 1/2^level resolution.

        Pixel centers sit at integer coordinates, so the principal point picks
        up the half-pixel shift of 2x2 average pooling at each level.
        """
        s = 2.0 ** (-level)
        return CameraIntrinsics(
            focal=self.focal * s,
            cx=(self.cx + 0.5) * s - 0.5,
            cy=(self.cy + 0.5) * s - 0.5,
            width=self.width >> level,
            height=self.height >> level,
        )


@dataclass
class Pose:
    """Camera-from-world rigid transform: x_cam = R @ x_world + t.

    Rotation is stored as a 6D representation (first two columns of R before
    Gram-Schmidt); `R` materializes the orthonormal matrix.
    """

    rotation6d: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation6d = np.asarray(self.rotation6d, dtype=np.float64).reshape(6)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0, 0, 0, 1.0, 0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_rotation6d(R), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return rotation6d_to_matrix(self.rotation6d)

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        Ra, Rb = self.R, other.R
        return Pose.from_matrix(Ra @ Rb, Ra @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def camera_center(self) -> np.ndarray:
        R = self.R
        return -R.T @ self.translation

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """World points (N, 3) to camera frame."""
        return pts @ self.R.T + self.translation

    def copy(self) -> "Pose":
        return Pose(self.rotation6d.copy(), self.translation.copy())


def project(intr: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """World points (N, 3) -> pixels (N, 2) and a validity mask (z > 0)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pose.transform(pts)
    z = cam[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    px = np.empty((len(pts), 2))
    px[:, 0] = intr.focal * cam[:, 0] / zs + intr.cx
    px[:, 1] = intr.focal * cam[:, 1] / zs + intr.cy
    px[~valid] = np.nan
    return px, valid


def unproject(intr: CameraIntrinsics, pose: Pose, pixels: np.ndarray,
              depths: np.ndarray) -> np.ndarray:
    """Pixels (N, 2) with camera-frame depths (N,) -> world points (N, 3)."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    x = (px[:, 0] - intr.cx) / intr.focal * d
    y = (px[:, 1] - intr.cy) / intr.focal * d
    cam = np.stack([x, y, d], axis=-1)
    R = pose.R
    return (cam - pose.translation) @ R


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Closed-form similarity aligning src (N, 3) onto dst: s, R, t.

    Minimizes ||dst - (s R src + t)||^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


# ---------------------------------------------------------------------------
# scene data


@dataclass
class GaussianPrimitive:
    """A single anisotropic 3D Gaussian with appearance."""

    position: np.ndarray       # (3,) world
    log_scale: np.ndarray      # (3,) log of per-axis std dev
    rotation: np.ndarray       # (4,) unit quaternion (w, x, y, z)
    opacity_logit: float
    color: np.ndarray          # (3,) RGB in [0, 1]
    birth_index: int           # keyframe index at spawn time


@dataclass
class Keyframe:
    index: int                       # position in the input frame ordering
    image: np.ndarray                # (H, W, 3) float64 in [0, 1]
    keypoints: np.ndarray            # (K, 2) pixel xy
    descriptors: np.ndarray          # (K, 32) uint8 packed 256-bit
    responses: np.ndarray            # (K,)
    pose: Pose = field(default_factory=Pose.identity)
    is_test: bool = False


MAX_KEYPOINTS = 6144


@dataclass
class Track:
    point: np.ndarray | None                 # (3,) world or None until triangulated
    obs: list                                # [(frame_index, kp_index, x, y)]


class TrackTable:
    """Feature tracks with per-track observation cap (supervision window)."""

    def __init__(self, n_obs_max: int = 6):
        self.n_obs_max = n_obs_max
        self.tracks: dict[int, Track] = {}
        self._by_obs: dict[tuple[int, int], int] = {}
        self._next = 0

    def __len__(self) -> int:
        return len(self.tracks)

    def new_track(self, obs: list, point: np.ndarray | None = None) -> int:
        if len(obs) < 2:
            raise ValueError("a track needs at least two observations")
        tid = self._next
        self._next += 1
        self.tracks[tid] = Track(point=point, obs=list(obs[-self.n_obs_max:]))
        for fr, kp, _, _ in self.tracks[tid].obs:
            self._by_obs[(fr, kp)] = tid
        return tid

    def track_of(self, frame_index: int, kp_index: int) -> int | None:
        return self._by_obs.get((frame_index, kp_index))

    def add_observation(self, tid: int, frame_index: int, kp_index: int,
                        x: float, y: float) -> None:
        tr = self.tracks[tid]
        tr.obs.append((frame_index, kp_index, x, y))
        while len(tr.obs) > self.n_obs_max:
            old = tr.obs.pop(0)
            self._by_obs.pop((old[0], old[1]), None)
        self._by_obs[(frame_index, kp_index)] = tid

    def points_in_frame(self, frame_index: int):
        """(pixels (M, 2), points (M, 3), track ids) for triangulated tracks
        observed in the given frame."""
        px, pts, ids = [], [], []
        for tid, tr in self.tracks.items():
            if tr.point is None:
                continue
            for fr, _, x, y in tr.obs:
                if fr == frame_index:
                    px.append((x, y))
                    pts.append(tr.point)
                    ids.append(tid)
                    break
        if not px:
            return np.zeros((0, 2)), np.zeros((0, 3)), []
        return np.array(px, dtype=np.float64), np.array(pts, dtype=np.float64), ids


@dataclass
class Anchor:
    """Frozen snapshot of an active set, quantized to the on-disk precision."""

    id: int
    location: np.ndarray                     # (3,) mean camera center
    positions: np.ndarray                    # (N, 3) float32
    log_scales: np.ndarray                   # (N, 3) float32
    rotations: np.ndarray                    # (N, 4) float32
    opacity_logits: np.ndarray               # (N,)  float32
    colors: np.ndarray                       # (N, 3) float32
    birth: np.ndarray                        # (N,)  uint32
    exp_avg: np.ndarray                      # (N, 14) float32 Adam m
    exp_avg_sq: np.ndarray                   # (N, 14) float32 Adam v
    keyframe_ids: list[int] = field(default_factory=list)
    primitive_ids: np.ndarray | None = None  # runtime only, not serialized

    @property
    def size(self) -> int:
        return len(self.positions)


# parameter layout per primitive, used to pack optimizer moments
PARAM_WIDTHS = (("positions", 3), ("log_scales", 3), ("rotations", 4),
                ("opacity_logits", 1), ("colors", 3))
PARAMS_PER_PRIMITIVE = 14


class ActiveSet:
    """Primitives currently being optimized, SoA layout, with Adam state.

    Invariant: every per-primitive array (parameters, moments, ages, ids)
    has the same leading length.
    """

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.opacity_logits = np.zeros((0,))
        self.colors = np.zeros((0, 3))
        self.birth = np.zeros((0,), dtype=np.int64)
        self.intro_iter = np.zeros((0,), dtype=np.int64)   # global iteration at spawn
        self.ids = np.zeros((0,), dtype=np.int64)
        self.exp_avg = np.zeros((0, PARAMS_PER_PRIMITIVE))
        self.exp_avg_sq = np.zeros((0, PARAMS_PER_PRIMITIVE))
        self.steps = np.zeros((0,), dtype=np.int64)        # Adam t per primitive
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.positions)

    def check(self) -> None:
        n = len(self.positions)
        for arr in (self.log_scales, self.rotations, self.opacity_logits,
                    self.colors, self.birth, self.intro_iter, self.ids,
                    self.exp_avg, self.exp_avg_sq, self.steps):
            assert len(arr) == n

    def append(self, positions, log_scales, rotations, opacity_logits, colors,
               birth_index: int, intro_iter: int) -> None:
        m = len(positions)
        if m == 0:
            return
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=np.float64)])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dtype=np.float64)])
        self.rotations = np.concatenate([self.rotations, np.asarray(rotations, dtype=np.float64)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64)])
        self.birth = np.concatenate([self.birth, np.full(m, birth_index, dtype=np.int64)])
        self.intro_iter = np.concatenate([self.intro_iter, np.full(m, intro_iter, dtype=np.int64)])
        self.ids = np.concatenate([self.ids, self._next_id + np.arange(m, dtype=np.int64)])
        self._next_id += m
        self.exp_avg = np.concatenate([self.exp_avg, np.zeros((m, PARAMS_PER_PRIMITIVE))])
        self.exp_avg_sq = np.concatenate([self.exp_avg_sq, np.zeros((m, PARAMS_PER_PRIMITIVE))])
        self.steps = np.concatenate([self.steps, np.zeros(m, dtype=np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        """Drop primitives where mask is False; optimizer rows follow."""
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "colors", "birth", "intro_iter", "ids",
                     "exp_avg", "exp_avg_sq", "steps"):
            setattr(self, name, getattr(self, name)[mask])

    def reissue_ids(self) -> None:
        """Fresh identities for every primitive (post-anchor duplication)."""
        n = len(self)
        self.ids = self._next_id + np.arange(n, dtype=np.int64)
        self._next_id += n

    def copy(self) -> "ActiveSet":
        out = ActiveSet()
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "colors", "birth", "intro_iter", "ids",
                     "exp_avg", "exp_avg_sq", "steps"):
            setattr(out, name, getattr(self, name).copy())
        out._next_id = self._next_id
        return out
