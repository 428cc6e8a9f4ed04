"""Capture configuration: one flat dataclass, serialized as key=value lines."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class LmConfig:
    """Damped least-squares settings shared by bootstrap and pose refinement."""

    lambda_init: float = 1e-5
    nu: float = 2.0
    huber_delta: float = 2.0       # px
    mad_factor: float = 4.0
    max_iters: int = 200


@dataclass
class CaptureConfig:
    # registration
    n_init: int = 8                      # frames consumed by the bootstrap
    n_obs_max: int = 6                   # supervision window per track
    keyframe_threshold: float = 0.03     # median displacement gate, x width
    min_gate_matches: int = 10
    focal_init_factor: float = 0.7       # initial focal = factor x width

    # damped least squares
    lm_lambda_init: float = 1e-5
    lm_nu: float = 2.0
    lm_huber_delta: float = 2.0
    lm_mad_factor: float = 4.0
    bootstrap_iters: int = 200
    refine_iters: int = 20

    # pose hypotheses
    ransac_hypotheses: int = 256
    ransac_sample: int = 4
    ransac_lm_iters: int = 5
    ransac_inlier_px: float = 3.0
    ransac_min_inlier_ratio: float = 0.2

    # triangulation
    tri_max_reproj_px: float = 8.0
    tri_min_angle_deg: float = 0.5

    # degenerate-baseline restart
    rebootstrap_window: int = 20
    rebootstrap_min_dist: float = 0.1 / 3.0
    align_max_px: float = 1.0

    # primitive sampling
    sampler_sigma: float = 1.0
    sampler_candidates: int = 32
    sampler_patch: int = 7
    sampler_knn: int = 16
    sampler_min_tracks: int = 20
    sampler_ncc_min: float = 0.5
    sampler_inv_depth_halfwidth: float = 0.1
    sampler_prob_floor: float = 1.0 / 1024.0
    sampler_max_spawn: int = 4096        # per-keyframe spawn cap
    spawn_opacity: float = 0.1

    # joint optimization
    iterations: int = 30                 # per new keyframe
    l_max: int = 3                       # coarsest pyramid level
    level_step: int = 5                  # iterations per level
    train_window: int = 8                # recent keyframes sampled for training
    pose_freeze_iters: int = 10          # new pose held fixed this long
    lr_position: float = 1.6e-4          # scaled by scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_pose: float = 1e-3
    lr_decay: float = 0.9995             # per-iteration, per-primitive age decay
    cull_opacity: float = 0.005
    ssim_weight: float = 0.2
    near_plane: float = 0.01

    # anchors
    tau_min: float = 1.0                 # px screen-size threshold
    trigger_fraction: float = 0.40
    merge_k: int = 3
    blend_overlap: float = 0.1
    anchors_enabled: bool = True

    # protocol
    test_stride: int = 8                 # every n-th frame held out
    finetune_epochs: int = 0
    seed: int = 0

    _NON_NEGATIVE = ("finetune_epochs", "seed")

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if f.name in self._NON_NEGATIVE:
                if v < 0:
                    raise ValueError(
                        f"config field {f.name} must be non-negative, got {v}")
                continue
            if isinstance(v, (int, float)) and v <= 0:
                raise ValueError(f"config field {f.name} must be positive, got {v}")
        if not 0 < self.blend_overlap < 0.5:
            raise ValueError("blend_overlap must lie in (0, 0.5)")

    def lm(self, max_iters: int | None = None) -> LmConfig:
        return LmConfig(
            lambda_init=self.lm_lambda_init,
            nu=self.lm_nu,
            huber_delta=self.lm_huber_delta,
            mad_factor=self.lm_mad_factor,
            max_iters=self.bootstrap_iters if max_iters is None else max_iters,
        )


def save_config(cfg: CaptureConfig, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name}={getattr(cfg, f.name)!r}".replace("'", ""))
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path: str | Path, base: CaptureConfig | None = None) -> CaptureConfig:
    """Parse flat key=value lines; unknown keys are an error."""
    cfg = dataclasses.replace(base) if base is not None else CaptureConfig()
    types = {f.name: f.type for f in dataclasses.fields(cfg)}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
        cur = getattr(cfg, key)
        if isinstance(cur, bool):
            if val.lower() not in ("true", "false", "0", "1"):
                raise ValueError(f"{path}:{ln}: bad boolean {val!r}")
            setattr(cfg, key, val.lower() in ("true", "1"))
        elif isinstance(cur, int):
            setattr(cfg, key, int(val))
        else:
            setattr(cfg, key, float(val))
    cfg.validate()
    return cfg
