"""Sparse image frontend: keypoint detection, binary descriptors, matching.

Deterministic multi-scale detector combining a Harris-style corner channel
with scale-normalized Laplacian blob extrema, refined to subpixel by a
quadratic fit. Description is a 256-bit intensity-comparison binary
descriptor over a smoothed 31x31 patch whose comparison endpoints span
color channels. Matching is mutual-nearest-neighbor under Hamming distance
with a ratio test; a local flow-consistency filter removes geometric
outliers.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .scene import MAX_KEYPOINTS

HARRIS_K = 0.06
NMS_RADIUS = 1
RESPONSE_REL_THRESHOLD = 1e-5
BLOB_REL_THRESHOLD = 0.02
BLOB_SIGMAS = (1.2, 2.4, 4.8)
BLOB_WEIGHT = 0.5            # blob responses rank below equal-strength corners
DEDUPE_RADIUS = 1.5
PATCH_RADIUS = 15            # descriptor patch is 31x31
DESCRIPTOR_SMOOTH_SIGMA = 1.0
DESCRIPTOR_BITS = 256
RATIO_MAX = 0.95

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _descriptor_pattern():
    """Fixed comparison endpoints: (256, 4) y/x offsets concentrated near the
    patch center, plus (256, 2) color-channel indices for the endpoints."""
    rng = np.random.Generator(np.random.Philox(key=0x5EED_FACE))
    raw = rng.normal(0.0, PATCH_RADIUS / 2.5, size=(DESCRIPTOR_BITS, 4))
    pts = np.clip(np.round(raw), -PATCH_RADIUS, PATCH_RADIUS).astype(np.int64)
    chans = rng.integers(0, 3, size=(DESCRIPTOR_BITS, 2)).astype(np.int64)
    return pts, chans


_PAIRS, _PAIR_CHANNELS = _descriptor_pattern()


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def _harris_response(gray: np.ndarray) -> np.ndarray:
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = gaussian_blur(ix * ix, 1.5)
    syy = gaussian_blur(iy * iy, 1.5)
    sxy = gaussian_blur(ix * iy, 1.5)
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    return det - HARRIS_K * tr * tr


def _subpixel_offsets(resp: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Per-axis quadratic peak interpolation, offsets clamped to half a pixel."""
    h, w = resp.shape
    y0 = np.clip(ys, 1, h - 2)
    x0 = np.clip(xs, 1, w - 2)
    c = resp[y0, x0]
    dx = 0.5 * (resp[y0, x0 + 1] - resp[y0, x0 - 1])
    dy = 0.5 * (resp[y0 + 1, x0] - resp[y0 - 1, x0])
    dxx = resp[y0, x0 + 1] - 2.0 * c + resp[y0, x0 - 1]
    dyy = resp[y0 + 1, x0] - 2.0 * c + resp[y0 - 1, x0]
    sx = np.abs(dxx) > 1e-12
    sy = np.abs(dyy) > 1e-12
    ox = np.where(sx, -dx / np.where(sx, dxx, 1.0), 0.0)
    oy = np.where(sy, -dy / np.where(sy, dyy, 1.0), 0.0)
    return np.clip(ox, -0.5, 0.5), np.clip(oy, -0.5, 0.5)


def _detect(gray: np.ndarray):
    """Corner and blob peaks with subpixel refinement.

    Returns (xy (K, 2), response (K,), tiebreak (K, 3) int) unsorted. The
    corner channel is a Harris response normalized per image; blob channels
    are scale-normalized |Laplacian| extrema at BLOB_SIGMAS, down-weighted so
    corners dominate the ordering. Tiebreak is (channel, y, x).
    """
    size = 2 * NMS_RADIUS + 1
    chan_xy, chan_resp, chan_key = [], [], []

    resp = _harris_response(gray)
    local_max = ndimage.maximum_filter(resp, size=size, mode="nearest")
    thr = max(resp.max() * RESPONSE_REL_THRESHOLD, 1e-12)
    ys, xs = np.nonzero((resp >= local_max) & (resp > thr))
    ox, oy = _subpixel_offsets(resp, ys, xs)
    chan_xy.append(np.stack([xs + ox, ys + oy], axis=-1))
    chan_resp.append(resp[ys, xs] / max(resp.max(), 1e-300))
    chan_key.append(np.stack([np.zeros_like(ys), ys, xs], axis=-1))

    for ci, sig in enumerate(BLOB_SIGMAS, start=1):
        lap = np.abs(ndimage.laplace(gaussian_blur(gray, sig),
                                     mode="nearest")) * sig * sig
        local_max = ndimage.maximum_filter(lap, size=size, mode="nearest")
        thr = max(lap.max() * BLOB_REL_THRESHOLD, 1e-12)
        ys, xs = np.nonzero((lap >= local_max) & (lap > thr))
        ox, oy = _subpixel_offsets(lap, ys, xs)
        chan_xy.append(np.stack([xs + ox, ys + oy], axis=-1))
        chan_resp.append(BLOB_WEIGHT * lap[ys, xs] / max(lap.max(), 1e-300))
        chan_key.append(np.stack([np.full_like(ys, ci), ys, xs], axis=-1))

    return (np.concatenate(chan_xy), np.concatenate(chan_resp),
            np.concatenate(chan_key))


def _dedupe(xy: np.ndarray, order: np.ndarray, radius: float) -> np.ndarray:
    """Of near-coincident keypoints keep the first in `order`."""
    keep = np.ones(len(xy), dtype=bool)
    tree = cKDTree(xy)
    rank = np.empty(len(xy), dtype=np.int64)
    rank[order] = np.arange(len(xy))
    for i in order:
        if not keep[i]:
            continue
        for j in tree.query_ball_point(xy[i], radius):
            if j != i and rank[j] > rank[i]:
                keep[j] = False
    return keep


def detect_and_describe(image: np.ndarray, max_keypoints: int = MAX_KEYPOINTS):
    """Detect corner/blob keypoints and describe them.

    Returns (keypoints (K, 2) float64 subpixel xy, descriptors (K, 32)
    uint8, responses (K,) float64), sorted by response descending.
    Deterministic: ties broken by channel, then y, then x. Descriptor
    comparisons sample a smoothed color stack with replicated borders;
    grayscale input behaves as three identical channels.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = rgb_to_gray(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    h, w = gray.shape

    xy, resp, key = _detect(gray)
    if len(xy) == 0:
        return (np.zeros((0, 2)), np.zeros((0, 32), dtype=np.uint8),
                np.zeros(0))

    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0], -resp))
    keep = _dedupe(xy, order, DEDUPE_RADIUS)
    order = order[keep[order]][:max_keypoints]
    xy, resp = xy[order], resp[order]

    smooth = np.stack([gaussian_blur(img[..., c], DESCRIPTOR_SMOOTH_SIGMA)
                       for c in range(3)], axis=-1)
    ys = np.clip(np.round(xy[:, 1]).astype(np.int64), 0, h - 1)
    xs = np.clip(np.round(xy[:, 0]).astype(np.int64), 0, w - 1)
    p1y = np.clip(ys[:, None] + _PAIRS[None, :, 0], 0, h - 1)
    p1x = np.clip(xs[:, None] + _PAIRS[None, :, 1], 0, w - 1)
    p2y = np.clip(ys[:, None] + _PAIRS[None, :, 2], 0, h - 1)
    p2x = np.clip(xs[:, None] + _PAIRS[None, :, 3], 0, w - 1)
    bits = (smooth[p1y, p1x, _PAIR_CHANNELS[None, :, 0]]
            > smooth[p2y, p2x, _PAIR_CHANNELS[None, :, 1]])
    desc = np.packbits(bits, axis=1)
    return xy, desc, resp


def filter_matches_flow(kps_a: np.ndarray, kps_b: np.ndarray,
                        idx_a: np.ndarray, idx_b: np.ndarray,
                        k: int = 6, base_tol: float = 3.0,
                        rel_tol: float = 0.5) -> np.ndarray:
    """Keep matches whose displacement agrees with their spatial neighbors.

    The displacement field of true correspondences varies smoothly across
    the image; a match deviating from the median displacement of its k
    nearest matched neighbors by more than max(base_tol, rel_tol * |median|)
    pixels is rejected. Returns a keep mask over the matches.
    """
    if len(idx_a) < k + 1:
        return np.ones(len(idx_a), dtype=bool)
    pa = kps_a[idx_a]
    disp = kps_b[idx_b] - pa
    _, nb = cKDTree(pa).query(pa, k=k + 1)
    med = np.median(disp[nb[:, 1:]], axis=1)
    dev = np.linalg.norm(disp - med, axis=1)
    tol = np.maximum(base_tol, rel_tol * np.linalg.norm(med, axis=1))
    return dev <= tol


def hamming_distances(a: np.ndarray, b: np.ndarray,
                      chunk: int = 512) -> np.ndarray:
    """Pairwise Hamming distances between packed descriptors, (Na, Nb) int32."""
    out = np.empty((len(a), len(b)), dtype=np.int32)
    for i in range(0, len(a), chunk):
        x = a[i:i + chunk, None, :] ^ b[None, :, :]
        out[i:i + chunk] = _POPCOUNT[x].sum(axis=-1, dtype=np.int32)
    return out


def match(desc_a: np.ndarray, desc_b: np.ndarray):
    """Mutual-NN Hamming matching with a best/second-best ratio test.

    Returns (idx_a (M,), idx_b (M,), scores (M,)) sorted by idx_a.
    Symmetric: match(b, a) is the transpose.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(0))
    d = hamming_distances(desc_a, desc_b)

    def _nn_ratio(dist):
        nn = np.argmin(dist, axis=1)
        best = dist[np.arange(len(dist)), nn]
        if dist.shape[1] >= 2:
            part = np.partition(dist, 1, axis=1)
            second = part[:, 1].astype(np.float64)
            ratio = np.where(second > 0, best / np.maximum(second, 1e-12), 1.0)
            ok = ratio < RATIO_MAX
        else:
            ok = np.ones(len(dist), dtype=bool)
        return nn, ok

    nn_ab, ok_a = _nn_ratio(d)
    nn_ba, ok_b = _nn_ratio(d.T)
    ia = np.arange(len(desc_a))
    mutual = (nn_ba[nn_ab] == ia) & ok_a & ok_b[nn_ab]
    idx_a = ia[mutual]
    idx_b = nn_ab[mutual]
    scores = 1.0 - d[idx_a, idx_b] / float(DESCRIPTOR_BITS)
    return idx_a.astype(np.int64), idx_b.astype(np.int64), scores


def keyframe_gate(displacements: np.ndarray, width: int,
                  threshold: float = 0.03, min_matches: int = 10) -> bool:
    """Accept a frame as keyframe from its match displacements vs the last one.

    Too few matches means tracking is about to die: accept. Otherwise accept
    iff the median displacement exceeds threshold x image width (strict).
    """
    disp = np.asarray(displacements, dtype=np.float64)
    if disp.ndim == 2:
        disp = np.linalg.norm(disp, axis=1)
    if len(disp) < min_matches:
        return True
    return bool(np.median(disp) > threshold * width)


# ---------------------------------------------------------------------------
# feature file format
#
# magic "OTFFEAT1", then per frame: frame index u32, keypoint count u32,
# then count records of (x f32, y f32, response f32, 32 descriptor bytes).
# Little-endian throughout.

FEATURE_MAGIC = b"OTFFEAT1"


def save_features(path: str | Path, frames: list) -> None:
    """frames: list of (keypoints (K,2), descriptors (K,32) uint8, responses (K,))."""
    buf = [FEATURE_MAGIC]
    for index, (kp, desc, resp) in enumerate(frames):
        kp = np.asarray(kp, dtype=np.float32)
        resp = np.asarray(resp, dtype=np.float32)
        desc = np.asarray(desc, dtype=np.uint8)
        if len(kp) > MAX_KEYPOINTS:
            raise ValueError(f"frame {index}: {len(kp)} keypoints exceeds cap")
        buf.append(struct.pack("<II", index, len(kp)))
        rec = np.zeros(len(kp), dtype=np.dtype(
            [("x", "<f4"), ("y", "<f4"), ("r", "<f4"), ("d", "u1", 32)]))
        rec["x"], rec["y"], rec["r"] = kp[:, 0], kp[:, 1], resp
        rec["d"] = desc
        buf.append(rec.tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_features(path: str | Path) -> list:
    """Inverse of save_features. Raises ValueError on malformed input."""
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    off = 8
    frames = []
    rec_t = np.dtype([("x", "<f4"), ("y", "<f4"), ("r", "<f4"), ("d", "u1", 32)])
    expect = 0
    while off < len(raw):
        if off + 8 > len(raw):
            raise ValueError(f"{path}: truncated frame header at byte {off}")
        index, count = struct.unpack_from("<II", raw, off)
        off += 8
        if index != expect:
            raise ValueError(f"{path}: frame index {index}, expected {expect}")
        if count > MAX_KEYPOINTS:
            raise ValueError(f"{path}: frame {index} keypoint count {count} "
                             f"exceeds cap {MAX_KEYPOINTS}")
        nbytes = count * rec_t.itemsize
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated frame {index}")
        rec = np.frombuffer(raw, dtype=rec_t, count=count, offset=off)
        off += nbytes
        kp = np.stack([rec["x"], rec["y"]], axis=-1).astype(np.float64)
        frames.append((kp, rec["d"].copy(), rec["r"].astype(np.float64)))
        expect += 1
    return frames
