"""Anchor management: bounded working set via snapshot-and-merge.

When too many active primitives shrink below a screen-size threshold for the
current viewpoint, the whole active set is frozen into an anchor (a quantized
snapshot tied to the keyframes that built it) and the fine primitives are
collapsed into fewer, larger ones so optimization continues on a bounded
budget. At render time the one or two nearest anchors are blended.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene import (ActiveSet, Anchor, PARAMS_PER_PRIMITIVE, matrix_to_quat,
                    quat_to_matrix)

ANCHOR_MAGIC = b"OTFANCH1"
MERGE_EPS = 1e-6


def screen_size(positions: np.ndarray, log_scales: np.ndarray,
                camera_center: np.ndarray, focal: float) -> np.ndarray:
    """Approximate on-screen footprint in pixels: focal * max scale / range."""
    s = np.exp(np.max(log_scales, axis=1))
    d = np.linalg.norm(positions - camera_center[None, :], axis=1)
    return focal * s / np.maximum(d, 1e-12)


def fine_mask(active: ActiveSet, camera_center: np.ndarray, focal: float,
              tau_min: float = 1.0) -> np.ndarray:
    """Primitives whose footprint from this viewpoint is sub-threshold."""
    if len(active) == 0:
        return np.zeros(0, dtype=bool)
    return screen_size(active.positions, active.log_scales,
                       camera_center, focal) < tau_min


def anchor_trigger(active: ActiveSet, camera_center: np.ndarray, focal: float,
                   tau_min: float, trigger_fraction: float) -> bool:
    """True when strictly more than the trigger fraction of the active set
    has shrunk below tau_min pixels from the given viewpoint."""
    n = len(active)
    if n == 0:
        return False
    return int(fine_mask(active, camera_center, focal, tau_min).sum()) \
        > trigger_fraction * n


def create_anchor(anchor_id: int, active: ActiveSet, keyframe_ids: list,
                  location: np.ndarray) -> Anchor:
    """Snapshot the active set at storage precision.

    Parameters and optimizer moments are quantized to float32 (the on-disk
    format), so a file round trip is bit-exact against the in-memory anchor.
    """
    return Anchor(
        id=anchor_id,
        location=np.asarray(location, dtype=np.float32).copy(),
        positions=active.positions.astype(np.float32),
        log_scales=active.log_scales.astype(np.float32),
        rotations=active.rotations.astype(np.float32),
        opacity_logits=active.opacity_logits.astype(np.float32),
        colors=active.colors.astype(np.float32),
        birth=active.birth.astype(np.uint32),
        exp_avg=active.exp_avg.astype(np.float32),
        exp_avg_sq=active.exp_avg_sq.astype(np.float32),
        keyframe_ids=list(keyframe_ids),
        primitive_ids=active.ids.copy(),
    )


def merge_fine(active: ActiveSet, fine: np.ndarray, rng: np.random.Generator,
               k: int, birth_index: int, intro_iter: int) -> int:
    """Collapse fine primitives into ceil(|fine|/(k+1)) merged ones.

    Representatives are drawn uniformly without replacement; each consumes up
    to its k nearest unconsumed fine neighbors (greedy, non-overlapping), and
    stragglers join their nearest representative's group. Each group becomes
    one primitive by opacity-weighted moment matching, its covariance
    re-factored by eigendecomposition and its opacity set from the group /
    merged volume ratio. Merged primitives get fresh optimizer rows.

    No-op (returns 0) when |fine| < k + 1. Returns primitives removed net.
    """
    m = int(fine.sum())
    if m < k + 1:
        return 0
    idx_fine = np.nonzero(fine)[0]
    pos = active.positions[idx_fine]
    n_reps = int(np.ceil(m / (k + 1)))
    reps = np.sort(rng.choice(m, size=n_reps, replace=False))

    consumed = np.zeros(m, dtype=bool)
    consumed[reps] = True
    groups = [[int(r)] for r in reps]
    tree = cKDTree(pos)
    for gi, r in enumerate(reps):
        if consumed.all():
            break
        q = min(m, 4 * (k + 1))
        d, nb = tree.query(pos[r], k=q)
        nb = np.atleast_1d(nb)
        picked = [int(j) for j in nb if not consumed[j]][:k]
        if len(picked) < k and q < m:
            order = np.argsort(np.linalg.norm(pos - pos[r], axis=1),
                               kind="stable")
            picked = [int(j) for j in order if not consumed[j]][:k]
        for j in picked:
            consumed[j] = True
        groups[gi].extend(picked)
    leftovers = np.nonzero(~consumed)[0]
    if len(leftovers):
        d2rep = np.linalg.norm(pos[leftovers][:, None, :]
                               - pos[reps][None, :, :], axis=2)
        owner = np.argmin(d2rep, axis=1)
        for j, g in zip(leftovers, owner):
            groups[g].append(int(j))

    w_all = 1.0 / (1.0 + np.exp(-active.opacity_logits[idx_fine]))
    scales_all = np.exp(active.log_scales[idx_fine])
    R_all = quat_to_matrix(active.rotations[idx_fine])

    mp, ms, mr, mo, mc = [], [], [], [], []
    for g in groups:
        g = np.asarray(g)
        w = w_all[g]
        wsum = w.sum()
        p = pos[g]
        mu = (w[:, None] * p).sum(axis=0) / wsum
        cov = np.zeros((3, 3))
        for i, gi_ in enumerate(g):
            S = R_all[gi_] @ np.diag(scales_all[gi_] ** 2) @ R_all[gi_].T
            d = p[i] - mu
            cov += w[i] * (S + np.outer(d, d))
        cov /= wsum
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, 1e-12)
        if np.linalg.det(vecs) < 0:
            vecs = vecs.copy()
            vecs[:, 2] = -vecs[:, 2]
        log_s = 0.5 * np.log(vals)
        quat = matrix_to_quat(vecs)
        color = (w[:, None] * active.colors[idx_fine][g]).sum(axis=0) / wsum
        vol_i = np.prod(scales_all[g], axis=1)
        vol_m = float(np.exp(log_s.sum()))
        o = min(1.0 - MERGE_EPS, float((w * vol_i).sum() / max(vol_m, 1e-300)))
        o = max(o, MERGE_EPS)
        mp.append(mu)
        ms.append(log_s)
        mr.append(quat)
        mo.append(np.log(o / (1.0 - o)))
        mc.append(color)

    active.keep(~fine)
    active.append(positions=np.stack(mp), log_scales=np.stack(ms),
                  rotations=np.stack(mr), opacity_logits=np.array(mo),
                  colors=np.stack(mc), birth_index=birth_index,
                  intro_iter=intro_iter)
    return m - len(groups)


def select_anchors(camera_center: np.ndarray, locations: np.ndarray,
                   overlap: float = 0.1) -> list:
    """Blend weights over the one or two nearest anchors.

    r = d1/d2 for the two nearest anchor locations; below 1 - overlap the
    nearest wins outright, then its weight ramps linearly down to 1/2 at
    r = 1. Returns [(anchor_index, weight)] with weights summing to 1.
    """
    n = len(locations)
    if n == 0:
        raise ValueError("no anchors to select from")
    d = np.linalg.norm(np.asarray(locations, dtype=np.float64)
                       - np.asarray(camera_center, dtype=np.float64)[None, :],
                       axis=1)
    if n == 1:
        return [(0, 1.0)]
    order = np.argsort(d, kind="stable")
    i1, i2 = int(order[0]), int(order[1])
    d1, d2 = d[i1], d[i2]
    r = 1.0 if d2 <= 1e-300 else d1 / d2
    if r < 1.0 - overlap:
        return [(i1, 1.0)]
    w1 = 1.0 - (r - (1.0 - overlap)) * 0.5 / overlap
    return [(i1, w1), (i2, 1.0 - w1)]


# ---------------------------------------------------------------------------
# store and serialization


class AnchorStore:
    """Ordered collection of anchors produced by one capture."""

    def __init__(self):
        self.anchors: list[Anchor] = []

    def __len__(self) -> int:
        return len(self.anchors)

    def add(self, anchor: Anchor) -> None:
        self.anchors.append(anchor)

    def locations(self) -> np.ndarray:
        if not self.anchors:
            return np.zeros((0, 3))
        return np.stack([a.location.astype(np.float64) for a in self.anchors])

    def save(self, out_dir: str | Path) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for a in self.anchors:
            p = out_dir / f"anchor_{a.id:04d}.bin"
            save_anchor(p, a)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, in_dir: str | Path) -> "AnchorStore":
        store = cls()
        files = sorted(Path(in_dir).glob("anchor_*.bin"))
        if not files:
            raise FileNotFoundError(f"no anchor files under {in_dir}")
        for p in files:
            store.add(load_anchor(p))
        return store


_PRIM_DTYPE = np.dtype([
    ("position", "<f4", 3),
    ("log_scale", "<f4", 3),
    ("quaternion", "<f4", 4),
    ("opacity_logit", "<f4"),
    ("color", "<f4", 3),
    ("birth", "<u4"),
])


def save_anchor(path: str | Path, anchor: Anchor) -> None:
    """Little-endian binary anchor snapshot.

    Layout: magic "OTFANCH1"; anchor id u32; location 3xf32; keyframe id
    count u32 + ids u32 each; primitive count u32; per primitive position
    3xf32, log scale 3xf32, quaternion 4xf32, opacity logit f32, color 3xf32,
    birth index u32; then per primitive the two optimizer moments per
    parameter (first, second), parameters in the same order.
    """
    n = anchor.size
    rec = np.zeros(n, dtype=_PRIM_DTYPE)
    rec["position"] = anchor.positions
    rec["log_scale"] = anchor.log_scales
    rec["quaternion"] = anchor.rotations
    rec["opacity_logit"] = anchor.opacity_logits
    rec["color"] = anchor.colors
    rec["birth"] = anchor.birth
    moments = np.empty((n, 2 * PARAMS_PER_PRIMITIVE), dtype="<f4")
    moments[:, 0::2] = anchor.exp_avg
    moments[:, 1::2] = anchor.exp_avg_sq

    with open(path, "wb") as f:
        f.write(ANCHOR_MAGIC)
        f.write(struct.pack("<I", anchor.id))
        f.write(np.asarray(anchor.location, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(anchor.keyframe_ids)))
        f.write(np.asarray(anchor.keyframe_ids, dtype="<u4").tobytes())
        f.write(struct.pack("<I", n))
        f.write(rec.tobytes())
        f.write(moments.tobytes())


def load_anchor(path: str | Path) -> Anchor:
    raw = Path(path).read_bytes()
    if raw[:8] != ANCHOR_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    off = 8

    def take(count):
        nonlocal off
        if off + count > len(raw):
            raise ValueError(f"{path}: truncated at offset {off}")
        chunk = raw[off:off + count]
        off += count
        return chunk

    anchor_id = struct.unpack("<I", take(4))[0]
    location = np.frombuffer(take(12), dtype="<f4").copy()
    n_kf = struct.unpack("<I", take(4))[0]
    kf_ids = np.frombuffer(take(4 * n_kf), dtype="<u4").tolist()
    n = struct.unpack("<I", take(4))[0]
    rec = np.frombuffer(take(n * _PRIM_DTYPE.itemsize), dtype=_PRIM_DTYPE)
    moments = np.frombuffer(take(n * 8 * PARAMS_PER_PRIMITIVE),
                            dtype="<f4").reshape(n, 2 * PARAMS_PER_PRIMITIVE)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Anchor(
        id=anchor_id,
        location=location,
        positions=rec["position"].copy(),
        log_scales=rec["log_scale"].copy(),
        rotations=rec["quaternion"].copy(),
        opacity_logits=rec["opacity_logit"].copy(),
        colors=rec["color"].copy(),
        birth=rec["birth"].copy(),
        exp_avg=moments[:, 0::2].copy(),
        exp_avg_sq=moments[:, 1::2].copy(),
        keyframe_ids=[int(i) for i in kf_ids],
    )
