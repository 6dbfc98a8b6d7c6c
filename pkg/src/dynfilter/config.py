"""Flat ``key = value`` configuration with typed defaults.

Precedence when loading: explicit overrides > config file > defaults.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .core import CameraIntrinsics
from .errors import InputError, ParameterError
from .filtering import FilterWeights

ENV_VAR = "PCR_CONFIG"

TIERS = ("high", "medium", "low")


@dataclass(frozen=True)
class Config:
    # scoring weights and thresholds
    w_seg: float = 0.5
    w_motion: float = 0.2
    w_ground: float = 0.2
    w_edge: float = 0.1
    theta_threshold: float = 0.5
    v_max: float = 4.0
    tau_ground: float = 0.05
    edge_m0: float = 10.0
    edge_m1: float = 40.0
    cluster_radius: float = 15.0
    cluster_min_k: int = 3
    cluster_margin: float = 0.15
    vote_quota: float = 0.6
    motion_window: int = 5
    fast_seg_threshold: float = 0.5
    # detection post-processing
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45
    nms_class_aware: bool = True
    mask_open_radius: int = 1
    mask_close_radius: int = 1
    # ground plane
    ransac_alpha: float = 0.03
    ransac_tau_min: float = 0.02
    ransac_tau_max: float = 0.15
    camera_height: float = 1.65
    ground_min_drop: float = 0.3
    ground_max_tilt_deg: float = 30.0
    # pose refinement and keyframes
    huber_delta: float = 2.0
    max_iters: int = 50
    kf_n_min: int = 50
    kf_ratio_max: float = 0.6
    kf_dt_min: float = 0.25
    kf_q_min: float = 20.0
    # runtime and quality tiers
    frame_period: float = 0.1
    t_threshold: float = 0.0  # 0 means half the frame period
    hysteresis_frames: int = 3
    quality_mode: str = "fixed"
    quality_tier: str = "high"
    tier_high_ransac_iters: int = 500
    tier_medium_ransac_iters: int = 200
    tier_low_ransac_iters: int = 100
    tier_high_mask_scale: int = 1
    tier_medium_mask_scale: int = 2
    tier_low_mask_scale: int = 4
    tier_high_vote_window: int = 5
    tier_medium_vote_window: int = 3
    tier_low_vote_window: int = 2
    filtering: bool = True
    seed: int = 0
    threads: int = 1
    # camera
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.quality_mode not in ("fixed", "adaptive"):
            raise ParameterError("quality_mode must be 'fixed' or 'adaptive'")
        if self.quality_tier not in TIERS:
            raise ParameterError(f"quality_tier must be one of {TIERS}")
        if self.hysteresis_frames < 1:
            raise ParameterError("hysteresis_frames must be >= 1")
        for tier in TIERS:
            if getattr(self, f"tier_{tier}_mask_scale") not in (1, 2, 4):
                raise ParameterError("mask scales must be 1, 2 or 4 (full, half, quarter)")
        self.weights()

    def weights(self, vote_window: Optional[int] = None) -> FilterWeights:
        return FilterWeights(
            w_seg=self.w_seg, w_motion=self.w_motion, w_ground=self.w_ground, w_edge=self.w_edge,
            threshold=self.theta_threshold, v_max=self.v_max, tau_ground=self.tau_ground,
            edge_m0=self.edge_m0, edge_m1=self.edge_m1, cluster_radius=self.cluster_radius,
            cluster_min_k=self.cluster_min_k, cluster_margin=self.cluster_margin,
            vote_window=vote_window or self.tier_high_vote_window, vote_quota=self.vote_quota,
            motion_window=self.motion_window, fast_seg_threshold=self.fast_seg_threshold,
        )

    def tier_params(self, tier: str) -> Dict[str, int]:
        return {
            "ransac_iters": getattr(self, f"tier_{tier}_ransac_iters"),
            "mask_scale": getattr(self, f"tier_{tier}_mask_scale"),
            "vote_window": getattr(self, f"tier_{tier}_vote_window"),
        }

    @property
    def threshold_seconds(self) -> float:
        return self.t_threshold if self.t_threshold > 0 else 0.5 * self.frame_period

    def intrinsics(self) -> CameraIntrinsics:
        if self.fx <= 0 or self.width <= 0:
            raise InputError("camera intrinsics (fx, fy, cx, cy, width, height) are not configured")
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(f"not a boolean: {value!r}")
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(f"not a number: {value!r}")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config key {key!r}: {exc}") from None


def _check_keys(mapping, source):
    for key, value in mapping.items():
        if isinstance(value, dict):
            raise InputError(f"{source}: nested table {key!r} not supported; use flat keys")
        if key not in _FIELD_TYPES:
            raise InputError(f"{source}: unknown config key {key!r}")


def read_config_file(path) -> Dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    _check_keys(data, path)
    return data


def parse_override(text: str):
    """``key=value`` with the value read as a TOML scalar (bare words become strings)."""
    if "=" not in text:
        raise InputError(f"override {text!r} is not key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None, use_env=True) -> Config:
    values: Dict[str, Any] = {}
    if path is None and use_env:
        path = os.environ.get(ENV_VAR) or None
    if path is not None:
        values.update(read_config_file(path))
    if overrides:
        _check_keys(overrides, "override")
        values.update(overrides)
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    try:
        return Config(**coerced)
    except ParameterError as exc:
        raise InputError(str(exc)) from None


def dump_config(cfg: Config, path, keys=None):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in cfg.as_dict().items():
            if keys is not None and key not in keys:
                continue
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            else:
                text = repr(value)
            fh.write(f"{key} = {text}\n")
