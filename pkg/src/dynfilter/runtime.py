"""Frame pipeline: masks, filtering, pose refinement and keyframe gating, with
per-stage timing and an adaptive quality controller.

Semantic outputs (outlier flags, scores, poses, keyframes) depend only on the
inputs and the configuration. Worker count and stage overlap change wall time
only. Timing is measured with a monotonic clock and kept out of the semantic
outputs.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import TIERS, Config
from .core import CameraIntrinsics, Plane, Pose
from .errors import DegenerateError, NoConvergenceError, ParameterError, UnderdeterminedError
from .filtering import (
    FilterWeights,
    FrameFilterResult,
    PointObservation,
    Track,
    adaptive_ground_threshold,
    filter_frame,
    format_outlier_lines,
    ransac_ground_plane,
)
from .masks import ClassPolicy, DetectionRecord, SegMask, build_segmask
from .pose import Correspondence, keyframe_decision, refine_pose

log = logging.getLogger(__name__)

TIMING_HEADER = "frame,t_transfer,t_compute,t_sync,t_slam,t_inference,t_overlapped,tier"
MIN_INFO_WEIGHT = 1e-3


# --- timing model -------------------------------------------------------------

@dataclass(frozen=True)
class StageTiming:
    t_transfer: float = 0.0
    t_compute: float = 0.0
    t_sync: float = 0.0
    t_slam: float = 0.0
    t_inference: float = 0.0

    def __post_init__(self):
        for name in ("t_transfer", "t_compute", "t_sync", "t_slam", "t_inference"):
            if not getattr(self, name) >= 0.0:
                raise ParameterError(f"{name} must be non-negative")


def total_time(t: StageTiming) -> float:
    """Serial frame time: transfer + compute + synchronisation."""
    return t.t_transfer + t.t_compute + t.t_sync


def overlapped_time(t_slam, t_inference, t_sync) -> float:
    """Frame time when tracking and inference run concurrently."""
    if min(t_slam, t_inference, t_sync) < 0:
        raise ParameterError("stage times must be non-negative")
    return max(t_slam, t_inference) + t_sync


# --- adaptive quality ------------------------------------------------------------

class QualityTier(NamedTuple):
    tier: str
    ransac_iters: int
    mask_scale: int  # downscale factor: 1 full, 2 half, 4 quarter
    vote_window: int


DEFAULT_TIERS = {
    "high": QualityTier("high", 500, 1, 5),
    "medium": QualityTier("medium", 200, 2, 3),
    "low": QualityTier("low", 100, 4, 2),
}


def raw_tier(t_available, t_threshold) -> str:
    if not t_threshold > 0:
        raise ParameterError("t_threshold must be positive")
    if t_available > t_threshold:
        return "high"
    if t_available > 0.5 * t_threshold:
        return "medium"
    return "low"


@dataclass(frozen=True)
class QualityState:
    """Controller memory: the emitted tier and the current run of a differing raw tier."""
    tier: str = "high"
    candidate: Optional[str] = None
    streak: int = 0


def select_quality(t_available, t_threshold, prev, hysteresis_frames: int = 3,
                   state: Optional[QualityState] = None) -> Tuple[str, QualityState]:
    """Debounced tier choice; the emitted tier changes only after
    ``hysteresis_frames`` consecutive frames agree on a new raw tier.

    Returns ``(tier, new_state)``.
    """
    if hysteresis_frames < 1:
        raise ParameterError("hysteresis_frames must be >= 1")
    prev_name = prev.tier if isinstance(prev, QualityTier) else str(prev)
    if prev_name not in TIERS:
        raise ParameterError(f"unknown tier {prev_name!r}")
    if state is None or state.tier != prev_name:
        state = QualityState(prev_name)
    raw = raw_tier(t_available, t_threshold)
    if raw == prev_name:
        return prev_name, QualityState(prev_name)
    streak = state.streak + 1 if raw == state.candidate else 1
    if streak >= hysteresis_frames:
        return raw, QualityState(raw)
    return prev_name, QualityState(prev_name, raw, streak)


def hysteresis_trace(raw_tiers: Sequence[str], start: str, hysteresis_frames: int) -> List[str]:
    """Emitted tiers for a sequence of raw tiers (the controller replayed offline)."""
    thresholds = {"high": 2.0, "medium": 0.75, "low": 0.25}
    out, tier, state = [], start, None
    for r in raw_tiers:
        tier, state = select_quality(thresholds[r], 1.0, tier, hysteresis_frames, state)
        out.append(tier)
    return out


# --- pipeline ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameInput:
    frame_id: int
    timestamp: float
    points: Optional[Sequence[PointObservation]]  # None when the points file is missing


@dataclass(eq=False)
class FrameResult:
    frame_id: int
    timestamp: float
    points: List[PointObservation]
    filter: FrameFilterResult
    pose: Pose  # world to camera
    keyframe: bool
    plane: Optional[Plane]
    tier: str
    n_correspondences: int
    cost: Optional[float]

    @property
    def camera_to_world(self) -> Pose:
        return self.pose.inverse().with_timestamp(self.timestamp)


@dataclass(frozen=True)
class TimingRow:
    frame: int
    timing: StageTiming
    tier: str

    def csv(self) -> str:
        t = self.timing
        vals = (t.t_transfer, t.t_compute, t.t_sync, t.t_slam, t.t_inference,
                overlapped_time(t.t_slam, t.t_inference, t.t_sync))
        return "%d,%s,%s" % (self.frame, ",".join("%.9f" % v for v in vals), self.tier)


@dataclass(eq=False)
class PipelineResult:
    frames: List[FrameResult] = field(default_factory=list)
    timing: List[TimingRow] = field(default_factory=list)
    errors: List[Tuple[int, str]] = field(default_factory=list)
    warnings: List[Tuple[int, str]] = field(default_factory=list)

    def poses_c2w(self) -> List[Pose]:
        return [f.camera_to_world for f in self.frames]


def _constant_velocity(poses: List[Pose], init: Pose) -> Pose:
    if not poses:
        return init
    if len(poses) == 1:
        return poses[-1]
    step = poses[-1] @ poses[-2].inverse()
    return step @ poses[-1]


def _robust_pose(init, corr, K, cfg, out_warnings, frame_id):
    try:
        res = refine_pose(init, corr, K, cfg.huber_delta, cfg.max_iters)
        return res.pose, res.cost
    except NoConvergenceError as exc:
        out_warnings.append((frame_id, f"pose refinement stalled: {exc}"))
        return exc.best_pose, exc.best_cost
    except UnderdeterminedError as exc:
        out_warnings.append((frame_id, f"pose kept at prediction: {exc}"))
        return init, None


def _ground_plane(points, cfg: Config, iters, frame_id, cam_height):
    """Ground plane in camera coordinates from points below the optical centre."""
    P = np.array([p.point3d for p in points if p.has_depth], dtype=float).reshape(-1, 3)
    P = P[P[:, 1] > cfg.ground_min_drop]
    if len(P) < 3:
        return None
    tau = adaptive_ground_threshold(cam_height, cfg.ransac_alpha, cfg.ransac_tau_min, cfg.ransac_tau_max)
    try:
        plane, inliers = ransac_ground_plane(P, n_iter=iters, tau=tau, seed=(cfg.seed, frame_id))
    except DegenerateError:
        return None
    if len(inliers) < 3:
        return None
    tilt = math.degrees(math.acos(min(1.0, abs(plane.b))))
    if tilt > cfg.ground_max_tilt_deg:
        return None
    return plane


class _MaskStage:
    """Builds masks, optionally ahead of time on a worker pool."""

    def __init__(self, detections, cfg: Config, K: CameraIntrinsics, policy, pool):
        self.detections = detections
        self.cfg = cfg
        self.K = K
        self.policy = policy
        self.pool = pool
        self.pending: Dict[Tuple[int, int], Future] = {}

    def _build(self, frame_id, scale):
        t0 = time.perf_counter()
        dets = self.detections.get(frame_id)
        if dets is None:
            seg = SegMask.empty(self.K.width, self.K.height)
        else:
            c = self.cfg
            seg = build_segmask(dets, self.K.width, self.K.height, c.conf_threshold, c.nms_threshold,
                                c.nms_class_aware, c.mask_open_radius, c.mask_close_radius, self.policy, scale)
        return seg, time.perf_counter() - t0

    def prefetch(self, frame_id, scale):
        if self.pool is not None and (frame_id, scale) not in self.pending:
            self.pending[(frame_id, scale)] = self.pool.submit(self._build, frame_id, scale)

    def get(self, frame_id, scale):
        """``(mask, build seconds, seconds spent waiting)``."""
        fut = self.pending.pop((frame_id, scale), None)
        if fut is None:
            seg, dt = self._build(frame_id, scale)
            return seg, dt, 0.0
        t0 = time.perf_counter()
        seg, dt = fut.result()
        return seg, dt, time.perf_counter() - t0


def run_pipeline(frames: Sequence[FrameInput], detections: Mapping[int, Sequence[DetectionRecord]],
                 config: Config, K: Optional[CameraIntrinsics] = None, init_pose: Optional[Pose] = None,
                 workers: int = 1, policy: Optional[ClassPolicy] = None) -> PipelineResult:
    """Process frames in ``frame_id`` order.

    Per frame: mask, preliminary robust pose (for ego-motion compensation of
    the point tracks), ground plane, filtering, then (after the filtering
    barrier) refinement on the unfiltered correspondences and the keyframe
    test. Map points are anchored at a track's first accepted observation.
    With ``config.filtering`` off, every point is kept and the preliminary
    robust pose is the final pose.
    """
    cfg = config
    K = K or cfg.intrinsics()
    policy = policy or ClassPolicy()
    init_pose = init_pose or Pose.identity()
    frames = sorted(frames, key=lambda f: f.frame_id)
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate frame ids in the stream")
    out = PipelineResult()
    if not frames:
        return out

    adaptive = cfg.quality_mode == "adaptive"
    tier = cfg.quality_tier
    qstate = QualityState(tier)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    masks = _MaskStage(detections, cfg, K, policy, pool)
    if pool is not None and not adaptive:
        scale = cfg.tier_params(tier)["mask_scale"]
        for f in frames:
            masks.prefetch(f.frame_id, scale)

    poses: List[Pose] = []
    tracks: Dict[int, Track] = {}
    history: Dict[int, Tuple[bool, ...]] = {}
    map_points: Dict[int, np.ndarray] = {}
    last_world: Dict[int, np.ndarray] = {}  # track -> world point from its latest depth observation
    last_flag: Dict[int, bool] = {}
    kf_pixels: Dict[int, Tuple[float, float]] = {}
    kf_time: Optional[float] = None
    cam_height = cfg.camera_height
    try:
        for fr in frames:
            if fr.points is None:
                out.errors.append((fr.frame_id, "points missing; frame skipped"))
                log.error("frame %d: points missing; frame skipped", fr.frame_id)
                continue
            params = cfg.tier_params(tier)
            if pool is not None and adaptive:
                masks.prefetch(fr.frame_id, params["mask_scale"])

            # transfer: assemble input arrays
            t0 = time.perf_counter()
            pts = [p if p.frame_id == fr.frame_id else PointObservation(p.track_id, p.pixel, p.point3d, fr.frame_id)
                   for p in fr.points]
            pts.sort(key=lambda p: p.track_id)
            t_transfer = time.perf_counter() - t0

            seg, t_inference, t_sync = masks.get(fr.frame_id, params["mask_scale"])
            if fr.frame_id not in detections:
                msg = "no detections; using an empty mask"
                out.warnings.append((fr.frame_id, msg))
                log.warning("frame %d: %s", fr.frame_id, msg)

            t1 = time.perf_counter()
            pred = _constant_velocity(poses, init_pose)
            # tracks flagged in the previous frame stay out of the preliminary estimate
            corr_all = [Correspondence(map_points[p.track_id], p.pixel) for p in pts
                        if p.track_id in map_points and not last_flag.get(p.track_id, False)]
            if poses:
                prelim, prelim_cost = _robust_pose(pred, corr_all, K, cfg, out.warnings, fr.frame_id)
            else:
                prelim, prelim_cost = init_pose, None

            # extend tracks with ego-motion predictions from the preliminary pose
            new_tracks = {}
            for p in pts:
                X = last_world.get(p.track_id)
                predicted = None
                if X is not None:
                    Xc = prelim.apply(X)
                    if Xc[2] > 1e-6:
                        predicted = (K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy)
                old = tracks.get(p.track_id)
                if old is None:
                    new_tracks[p.track_id] = Track(p.track_id, (fr.frame_id,), np.array([p.pixel]),
                                                   np.full((1, 2), np.nan))
                else:
                    new_tracks[p.track_id] = old.extended(fr.frame_id, p.pixel, predicted)

            plane = _ground_plane(pts, cfg, params["ransac_iters"], fr.frame_id, cam_height)
            if plane is not None:
                cam_height = abs(plane.d)
            result = filter_frame(pts, seg, new_tracks, plane, cfg.weights(params["vote_window"]), K=K,
                                  policy=policy, history=history, workers=workers, image_size=(K.width, K.height))
            if not cfg.filtering:
                result.outliers = np.zeros(len(pts), dtype=bool)
            t_compute = time.perf_counter() - t1

            # barrier: the filter result for this frame is complete before refinement
            t2 = time.perf_counter()
            outlier = {int(t): bool(o) for t, o in zip(result.track_ids, result.outliers)}
            static = {int(t): float(s) for t, s in zip(result.track_ids, result.staticness)}
            if cfg.filtering and poses:
                corr = [Correspondence(map_points[p.track_id], p.pixel,
                                       max(static[p.track_id], MIN_INFO_WEIGHT), outlier[p.track_id])
                        for p in pts if p.track_id in map_points]
                pose, cost = _robust_pose(prelim, corr, K, cfg, out.warnings, fr.frame_id)
            else:
                pose, cost = prelim, prelim_cost
            n_corr = sum(1 for p in pts if p.track_id in map_points and not outlier[p.track_id])
            n_filtered = int(np.sum(result.outliers))

            # map and track bookkeeping
            inv = pose.inverse()
            for p in pts:
                if p.has_depth:
                    Xw = inv.apply(np.asarray(p.point3d, dtype=float))
                    last_world[p.track_id] = Xw
                    if p.track_id not in map_points and not outlier[p.track_id]:
                        map_points[p.track_id] = Xw
                if outlier[p.track_id]:
                    # flagged tracks lose their anchor; a later clean sighting re-creates it
                    map_points.pop(p.track_id, None)
            last_flag = outlier
            tracks = new_tracks
            history = result.history
            poses.append(pose)

            if kf_time is None:
                is_kf = True
            else:
                common = [p for p in pts if p.track_id in kf_pixels]
                q = float(np.median([math.hypot(p.pixel[0] - kf_pixels[p.track_id][0],
                                                p.pixel[1] - kf_pixels[p.track_id][1]) for p in common])) if common else 0.0
                is_kf = keyframe_decision(n_corr, n_filtered, fr.timestamp - kf_time, q, cfg.kf_n_min,
                                          cfg.kf_ratio_max, cfg.kf_dt_min, cfg.kf_q_min)
            if is_kf:
                kf_time = fr.timestamp
                kf_pixels = {p.track_id: p.pixel for p in pts}
            t_slam = time.perf_counter() - t2

            timing = StageTiming(t_transfer, t_compute, t_sync, t_slam, t_inference)
            out.timing.append(TimingRow(fr.frame_id, timing, tier))
            out.frames.append(FrameResult(fr.frame_id, fr.timestamp, pts, result, pose, is_kf, plane, tier,
                                          n_corr, cost))
            if adaptive:
                critical = overlapped_time(t_slam + t_compute, t_inference, t_sync) + t_transfer
                tier, qstate = select_quality(cfg.frame_period - critical, cfg.threshold_seconds, tier,
                                              cfg.hysteresis_frames, qstate)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
    return out


# --- outputs ------------------------------------------------------------------------

def write_outputs(result: PipelineResult, out_dir) -> List[str]:
    """Write outlier files, poses, per-frame summary and the timing CSV; returns relative paths."""
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "outliers"), exist_ok=True)
    written = []
    for f in result.frames:
        rel = os.path.join("outliers", "%06d.txt" % f.frame_id)
        with open(os.path.join(out_dir, rel), "w", encoding="utf-8") as fh:
            fh.write(format_outlier_lines(f.filter))
        written.append(rel)
    with open(os.path.join(out_dir, "poses.txt"), "w", encoding="utf-8") as fh:
        for f in result.frames:
            M = np.hstack([f.camera_to_world.R, f.camera_to_world.t[:, None]])
            fh.write(" ".join("%.12e" % v for v in M.ravel()) + "\n")
    with open(os.path.join(out_dir, "frames.csv"), "w", encoding="utf-8") as fh:
        fh.write("frame,timestamp,points,outliers,correspondences,keyframe,tier,plane_a,plane_b,plane_c,plane_d\n")
        for f in result.frames:
            pl = ("%.9f,%.9f,%.9f,%.9f" % tuple(f.plane.coefficients())) if f.plane is not None else ",,,"
            fh.write("%d,%.9f,%d,%d,%d,%d,%s,%s\n" % (f.frame_id, f.timestamp, len(f.points), int(f.filter.outliers.sum()),
                                                      f.n_correspondences, int(f.keyframe), f.tier, pl))
    with open(os.path.join(out_dir, "errors.txt"), "w", encoding="utf-8") as fh:
        for fid, msg in result.errors:
            fh.write("%d error %s\n" % (fid, msg))
        for fid, msg in result.warnings:
            fh.write("%d warning %s\n" % (fid, msg))
    write_timing_csv(os.path.join(out_dir, "timing.csv"), result.timing)
    written += ["poses.txt", "frames.csv", "errors.txt", "timing.csv"]
    return written


def write_timing_csv(path, rows: Sequence[TimingRow]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TIMING_HEADER + "\n")
        for r in rows:
            fh.write(r.csv() + "\n")
