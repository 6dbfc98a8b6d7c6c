"""Multi-stage dynamic-point filtering.

Each keypoint gets four "badness" components in [0, 1] (semantic mask,
temporal motion, ground proximity, image-edge proximity). Their weighted sum
is turned into a staticness score ``1 - sum``; a point is an outlier when its
staticness falls below the threshold or when a later stage (fast-class rule,
temporal vote, neighbour expansion, sky test) forces it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .core import CameraIntrinsics, Plane, fit_plane_svd, horizon_line, line_side
from .errors import (
    DegenerateFitError,
    InsufficientDataError,
    NoPlaneError,
    ParameterError,
    ParseError,
)
from .masks import FAST_DYNAMIC, ClassPolicy, SegMask

HISTORY_LIMIT = 32


@dataclass(frozen=True)
class FilterWeights:
    w_seg: float = 0.5
    w_motion: float = 0.2
    w_ground: float = 0.2
    w_edge: float = 0.1
    threshold: float = 0.5
    v_max: float = 4.0
    tau_ground: float = 0.05
    edge_m0: float = 10.0
    edge_m1: float = 40.0
    cluster_radius: float = 15.0
    cluster_min_k: int = 3
    cluster_margin: float = 0.15
    vote_window: int = 5
    vote_quota: float = 0.6
    motion_window: int = 5
    fast_seg_threshold: float = 0.5
    vote_motion_threshold: float = 0.5
    vote_seg_threshold: float = 0.7

    def __post_init__(self):
        w = (self.w_seg, self.w_motion, self.w_ground, self.w_edge)
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ParameterError("weights must be non-negative and sum to 1")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError("threshold must lie in (0, 1)")
        if not self.edge_m0 < self.edge_m1:
            raise ParameterError("edge margins need m0 < m1")
        if not 0.0 < self.vote_quota <= 1.0:
            raise ParameterError("vote quota must lie in (0, 1]")
        if self.vote_window < 1 or self.motion_window < 1:
            raise ParameterError("windows must be at least one frame")
        if self.v_max <= 0 or self.tau_ground <= 0 or self.cluster_radius <= 0 or self.cluster_min_k < 1:
            raise ParameterError("v_max, tau_ground, cluster radius and min_k must be positive")

    @property
    def vector(self):
        return (self.w_seg, self.w_motion, self.w_ground, self.w_edge)


@dataclass(frozen=True, eq=False)
class PointObservation:
    track_id: int
    pixel: Tuple[float, float]
    point3d: Optional[np.ndarray] = None
    frame_id: int = 0

    @property
    def has_depth(self):
        return self.point3d is not None and float(self.point3d[2]) > 0.0


class ScoreBreakdown(NamedTuple):
    s_seg: float
    s_motion: float
    s_ground: float
    s_edge: float
    weighted: float
    staticness: float
    outlier: bool


@dataclass(frozen=True, eq=False)
class Track:
    """Pixel history of one keypoint.

    ``predicted`` optionally holds, for each observation, where a static
    world point seen at the previous observation would have landed. When
    given, displacements are flow residuals after ego-motion compensation.
    """

    track_id: int
    frames: Tuple[int, ...]
    pixels: np.ndarray
    predicted: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = tuple(int(f) for f in self.frames)
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ParameterError("track frame ids must be strictly increasing")
        pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(pixels) != len(frames):
            raise ParameterError("one pixel per frame id")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "pixels", pixels)
        if self.predicted is not None:
            pred = np.asarray(self.predicted, dtype=float).reshape(-1, 2)
            if len(pred) != len(frames):
                raise ParameterError("one prediction per frame id")
            object.__setattr__(self, "predicted", pred)

    def displacements(self):
        """``(frame_ids, vectors)`` of per-frame displacements (pixels per frame),
        one fewer than observations. With predictions, an observation lacking a
        finite prediction yields a NaN row (no compensated displacement)."""
        if len(self.frames) < 2:
            return (), np.zeros((0, 2))
        gaps = np.diff(np.asarray(self.frames, dtype=float))[:, None]
        if self.predicted is None:
            d = np.diff(self.pixels, axis=0)
        else:
            d = self.pixels[1:] - self.predicted[1:]
        return self.frames[1:], d / gaps

    def extended(self, frame_id, pixel, predicted=None):
        pix = np.vstack([self.pixels, np.asarray(pixel, dtype=float).reshape(1, 2)])
        frames = self.frames + (int(frame_id),)
        pred = None
        if self.predicted is not None or predicted is not None:
            old = self.predicted if self.predicted is not None else np.full((len(self.frames), 2), np.nan)
            new = np.full((1, 2), np.nan) if predicted is None else np.asarray(predicted, dtype=float).reshape(1, 2)
            pred = np.vstack([old, new])
        if len(frames) > HISTORY_LIMIT:
            frames, pix = frames[-HISTORY_LIMIT:], pix[-HISTORY_LIMIT:]
            pred = None if pred is None else pred[-HISTORY_LIMIT:]
        # inputs are already validated, so skip the constructor checks
        out = object.__new__(Track)
        for name, value in (("track_id", self.track_id), ("frames", frames), ("pixels", pix), ("predicted", pred)):
            object.__setattr__(out, name, value)
        return out


def bilinear_sample(field, x, y) -> float:
    """Bilinear interpolation with border clamping."""
    return float(kernels.bilinear_many(field, [x], [y])[0])


def edge_score(pixel, width, height, m0, m1) -> float:
    """1 inside the outer margin ``m0``, 0 beyond ``m1``, linear in between."""
    if not m0 < m1:
        raise ParameterError("edge margins need m0 < m1")
    return float(kernels.edge_scores([pixel[0]], [pixel[1]], width, height, m0, m1)[0])


def temporal_motion(track: Optional[Track], window: int, t: Optional[int] = None) -> float:
    """Mean displacement magnitude (px/frame) over the last ``window`` displacements up to frame ``t``."""
    if track is None:
        return 0.0
    frames, d = track.displacements()
    if len(frames) == 0:
        return 0.0
    keep = np.isfinite(d).all(axis=1)
    if t is not None:
        keep &= np.asarray(frames) <= t
    d = d[keep]
    if len(d) == 0:
        return 0.0
    d = d[-window:]
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def temporal_vote(history: Sequence[bool], window: int, quota: float) -> bool:
    """True when the last ``window`` evidence flags reach ``ceil(quota * n)`` votes."""
    if window < 1:
        raise ParameterError("vote window must be at least 1")
    recent = list(history)[-window:]
    if not recent:
        return False
    need = math.ceil(quota * len(recent) - 1e-9)
    return sum(bool(v) for v in recent) >= need


def adaptive_ground_threshold(camera_height, alpha=0.03, tau_min=0.02, tau_max=0.15) -> float:
    if camera_height < 0:
        raise ParameterError("camera height must be non-negative")
    return min(max(alpha * camera_height, tau_min), tau_max)


def _compensated_sum(terms):
    # Neumaier summation: 0.5 + 0.2 + 0.2 + 0.1 comes out as exactly 1.0
    total = terms[0]
    comp = np.zeros_like(total)
    for x in terms[1:]:
        t = total + x
        comp = comp + np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
    return total + comp


def _staticness(s_seg, s_motion, s_ground, s_edge, w: FilterWeights):
    terms = [np.multiply(w.w_seg, s_seg), np.multiply(w.w_motion, s_motion),
             np.multiply(w.w_ground, s_ground), np.multiply(w.w_edge, s_edge)]
    weighted = _compensated_sum(terms)
    return weighted, np.clip(1.0 - weighted, 0.0, 1.0)


def score_point(p: PointObservation, seg: SegMask, track: Optional[Track], plane: Optional[Plane],
                w: FilterWeights, image_size=None) -> ScoreBreakdown:
    """Score one keypoint; see :func:`filter_frame` for the batched form."""
    width, height = image_size if image_size is not None else (seg.width, seg.height)
    u, v = p.pixel
    s_seg = bilinear_sample(seg.dynamic_confidence, u, v)
    s_motion = min(temporal_motion(track, w.motion_window, p.frame_id) / w.v_max, 1.0)
    s_ground = 0.0
    if plane is not None and p.point3d is not None:
        d = kernels.plane_abs_distances(np.asarray(p.point3d, dtype=float), plane.a, plane.b, plane.c, plane.d)[0]
        s_ground = min(max(1.0 - d / w.tau_ground, 0.0), 1.0)
    s_edge = edge_score((u, v), width, height, w.edge_m0, w.edge_m1)
    weighted, staticness = _staticness(s_seg, s_motion, s_ground, s_edge, w)
    staticness = float(staticness)
    return ScoreBreakdown(s_seg, s_motion, s_ground, s_edge, float(weighted), staticness, staticness < w.threshold)


def sky_test(pixel, seg: SegMask, horizon, has_depth: bool = False) -> bool:
    u, v = pixel
    col = min(max(int(round(u)), 0), seg.width - 1)
    row = min(max(int(round(v)), 0), seg.height - 1)
    if seg.sky[row, col]:
        return True
    if horizon is None or has_depth:
        return False
    return bool(line_side(horizon, u, v) < 0 and seg.dynamic_confidence[row, col] == 0.0)


def cluster_expand(points, outliers, staticness, radius, min_k, threshold=0.5, margin=0.15):
    """Single-pass neighbour expansion of the outlier set.

    A non-outlier joins when at least ``min_k`` outliers lie within ``radius``
    pixels and its staticness is below ``threshold + margin``.
    """
    if radius <= 0 or min_k < 1:
        raise ParameterError("cluster radius must be positive and min_k >= 1")
    uv = _pixels(points)
    out = np.asarray(outliers, dtype=bool)
    stat = np.asarray(staticness, dtype=float)
    if len(out) == 0:
        return out.copy()
    counts = kernels.neighbor_counts(uv[:, 0], uv[:, 1], out, radius)
    return out | ((counts >= min_k) & (stat < threshold + margin))


def _pixels(points):
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(float)
    return np.array([p.pixel for p in points], dtype=float).reshape(-1, 2)


class BlockMatch(NamedTuple):
    dx: int
    dy: int
    ssd: float
    low_confidence: bool


def block_match_displacement(prev, nxt, center, patch=4, search=8) -> BlockMatch:
    """Integer SSD block matching of the ``(2*patch+1)^2`` window at ``center``.

    Ties go to the smaller shift, then lexicographically on ``(dx, dy)``. A
    flat reference patch yields ``(0, 0)`` flagged as low confidence.
    """
    prev = np.asarray(prev, dtype=float)
    nxt = np.asarray(nxt, dtype=float)
    if prev.shape != nxt.shape or min(prev.shape) < 2 * patch + 1:
        raise ParameterError("images must match and fit the patch")
    dx, dy, ssd, flat = kernels.block_match(prev, nxt, int(round(center[0])), int(round(center[1])), patch, search)
    return BlockMatch(int(dx), int(dy), float(ssd), bool(flat))


# --- ground plane -----------------------------------------------------------

def _plane_from_sample(P):
    (ux, uy, uz), (vx, vy, vz) = (P[1] - P[0]).tolist(), (P[2] - P[0]).tolist()
    n = np.array([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx])
    norm = math.sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2])
    scale = math.sqrt((ux * ux + uy * uy + uz * uz) * (vx * vx + vy * vy + vz * vz))
    if norm <= 1e-12 * max(scale, 1e-300):
        return None
    n = n / norm
    return n[0], n[1], n[2], -float(n @ P[0])


def ransac_ground_plane(points, n_iter=500, tau=0.05, seed=0, confidence=0.99):
    """Seeded 3-point RANSAC; returns ``(Plane, inlier indices)``.

    Stops early once ``(1 - w^3)^k <= 1 - confidence`` for the best inlier
    ratio ``w``; the winning hypothesis is re-fitted on its inliers by SVD.
    """
    P = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
    n = len(P)
    if n < 3:
        raise InsufficientDataError("RANSAC needs at least 3 points")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    for it in range(n_iter):
        sample = rng.choice(n, 3, replace=False)
        cand = _plane_from_sample(P[sample])
        if cand is None:
            continue
        count = kernels.count_inliers(P, *cand, tau)
        if count > best_count:
            best, best_count = cand, count
            w = best_count / n
            if w >= 1.0:
                break
            needed = math.log(1.0 - confidence) / math.log(1.0 - w ** 3) if w > 0 else math.inf
            if it + 1 >= needed:
                break
    if best is None:
        raise NoPlaneError("every sampled triple was degenerate")
    inliers = np.flatnonzero(kernels.plane_abs_distances(P, *best) <= tau)
    try:
        plane = fit_plane_svd(P[inliers])
    except DegenerateFitError:
        plane = Plane.from_coefficients(*best)
    final = np.flatnonzero(kernels.plane_abs_distances(P, plane.a, plane.b, plane.c, plane.d) <= tau)
    return plane, final


def downward_normal(plane: Plane):
    """Plane normal oriented from the camera origin towards the plane."""
    return -plane.normal if plane.d > 0 else plane.normal


# --- per-frame composition --------------------------------------------------

@dataclass(eq=False)
class FrameFilterResult:
    track_ids: np.ndarray
    s_seg: np.ndarray
    s_motion: np.ndarray
    s_ground: np.ndarray
    s_edge: np.ndarray
    weighted: np.ndarray
    staticness: np.ndarray
    by_threshold: np.ndarray
    by_fast_class: np.ndarray
    by_vote: np.ndarray
    by_cluster: np.ndarray
    by_sky: np.ndarray
    outliers: np.ndarray
    history: Dict[int, Tuple[bool, ...]] = field(default_factory=dict)

    def __len__(self):
        return len(self.track_ids)

    def breakdown(self, i) -> ScoreBreakdown:
        return ScoreBreakdown(
            float(self.s_seg[i]), float(self.s_motion[i]), float(self.s_ground[i]), float(self.s_edge[i]),
            float(self.weighted[i]), float(self.staticness[i]), bool(self.outliers[i]),
        )

    @property
    def breakdowns(self) -> List[ScoreBreakdown]:
        return [self.breakdown(i) for i in range(len(self))]


def _score_chunk(uv, xyz, has3d, motion, seg, plane, w, width, height):
    s_seg = kernels.bilinear_many(seg.dynamic_confidence, uv[:, 0], uv[:, 1])
    s_edge = kernels.edge_scores(uv[:, 0], uv[:, 1], width, height, w.edge_m0, w.edge_m1)
    s_ground = np.zeros(len(uv))
    if plane is not None and has3d.any():
        d = kernels.plane_abs_distances(xyz, plane.a, plane.b, plane.c, plane.d)
        s_ground = np.where(has3d, np.clip(1.0 - d / w.tau_ground, 0.0, 1.0), 0.0)
    s_motion = np.minimum(motion / w.v_max, 1.0)
    return s_seg, s_motion, s_ground, s_edge


CHUNK = 256


def filter_frame(points: Sequence[PointObservation], seg: SegMask, tracks: Optional[Mapping[int, Track]] = None,
                 plane: Optional[Plane] = None, weights: FilterWeights = FilterWeights(), *,
                 K: Optional[CameraIntrinsics] = None, policy: Optional[ClassPolicy] = None,
                 history: Optional[Mapping[int, Sequence[bool]]] = None, workers: int = 1,
                 image_size=None) -> FrameFilterResult:
    """Run every filtering stage on one frame.

    Per-point scores are computed in fixed-size chunks (optionally on a thread
    pool) and merged in input order, so results do not depend on ``workers``.
    ``history`` maps track ids to past vote evidence; the updated map is
    returned in the result and the input is not modified.
    """
    w = weights
    tracks = tracks or {}
    history = history or {}
    policy = policy or ClassPolicy()
    width, height = image_size if image_size is not None else (seg.width, seg.height)
    n = len(points)
    ids = np.array([p.track_id for p in points], dtype=np.int64)
    if len(np.unique(ids)) != n:
        raise ParameterError("duplicate track ids in one frame")
    frames = {p.frame_id for p in points}
    if len(frames) > 1:
        raise ParameterError("points from more than one frame")
    frame_id = frames.pop() if frames else None
    uv = _pixels(points) if n else np.zeros((0, 2))
    has3d = np.array([p.point3d is not None for p in points], dtype=bool)
    xyz = np.array([p.point3d if p.point3d is not None else (0.0, 0.0, 1.0) for p in points], dtype=float).reshape(-1, 3)
    depth_ok = np.array([p.has_depth for p in points], dtype=bool)
    motion = np.array([temporal_motion(tracks.get(int(t)), w.motion_window, frame_id) for t in ids], dtype=float)

    parts = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    job = lambda se: _score_chunk(uv[se[0]:se[1]], xyz[se[0]:se[1]], has3d[se[0]:se[1]], motion[se[0]:se[1]],
                                  seg, plane, w, width, height)
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(job, parts))
    else:
        chunks = [job(se) for se in parts]
    if chunks:
        s_seg, s_motion, s_ground, s_edge = (np.concatenate([c[k] for c in chunks]) for k in range(4))
    else:
        s_seg = s_motion = s_ground = s_edge = np.zeros(0)
    weighted, staticness = _staticness(s_seg, s_motion, s_ground, s_edge, w)
    by_threshold = staticness < w.threshold

    # class tiers: fast movers are dropped immediately, the rest go to the vote
    by_fast = np.zeros(n, dtype=bool)
    cols = np.clip(np.rint(uv[:, 0]).astype(int), 0, seg.width - 1) if n else np.zeros(0, int)
    rows = np.clip(np.rint(uv[:, 1]).astype(int), 0, seg.height - 1) if n else np.zeros(0, int)
    for i in range(n):
        cid = int(seg.class_map[rows[i], cols[i]])
        if cid and s_seg[i] >= w.fast_seg_threshold and policy.category(cid) == FAST_DYNAMIC:
            by_fast[i] = True

    evidence = (s_motion > w.vote_motion_threshold) | (s_seg > w.vote_seg_threshold)
    new_history = dict(history)
    by_vote = np.zeros(n, dtype=bool)
    for i, tid in enumerate(ids.tolist()):
        h = tuple(history.get(tid, ()))[-(HISTORY_LIMIT - 1):] + (bool(evidence[i]),)
        new_history[tid] = h
        by_vote[i] = temporal_vote(h, w.vote_window, w.vote_quota)

    pre = by_threshold | by_fast | by_vote
    expanded = cluster_expand(uv, pre, staticness, w.cluster_radius, w.cluster_min_k, w.threshold, w.cluster_margin)
    by_cluster = expanded & ~pre

    horizon = None
    if plane is not None and K is not None:
        horizon = horizon_line(K, downward_normal(plane))
    by_sky = np.array([sky_test(uv[i], seg, horizon, bool(depth_ok[i])) for i in range(n)], dtype=bool)

    return FrameFilterResult(
        track_ids=ids, s_seg=s_seg, s_motion=s_motion, s_ground=s_ground, s_edge=s_edge,
        weighted=weighted, staticness=staticness, by_threshold=by_threshold, by_fast_class=by_fast,
        by_vote=by_vote, by_cluster=by_cluster, by_sky=by_sky, outliers=expanded | by_sky,
        history=new_history,
    )


# --- files -----------------------------------------------------------------

def read_points(path, frame_id=0) -> List[PointObservation]:
    """Parse ``track_id u v [X Y Z]`` lines."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].split()
            if not s:
                continue
            if len(s) not in (3, 6):
                raise ParseError(f"expected 3 or 6 fields, got {len(s)}", path, lineno)
            try:
                tid = int(s[0])
                vals = [float(x) for x in s[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            p3 = np.array(vals[2:5]) if len(vals) == 5 else None
            out.append(PointObservation(tid, (vals[0], vals[1]), p3, frame_id))
    return out


def write_points(path, points: Sequence[PointObservation]):
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            row = [str(int(p.track_id)), repr(float(p.pixel[0])), repr(float(p.pixel[1]))]
            if p.point3d is not None:
                row += [repr(float(x)) for x in p.point3d]
            fh.write(" ".join(row) + "\n")


def format_outlier_lines(result: FrameFilterResult) -> str:
    lines = []
    for i in range(len(result)):
        lines.append(
            "%d %d %.9f %.9f %.9f %.9f %.9f"
            % (result.track_ids[i], int(result.outliers[i]), result.staticness[i], result.s_seg[i],
               result.s_motion[i], result.s_ground[i], result.s_edge[i])
        )
    return "".join(line + "\n" for line in lines)


def read_outliers(path) -> Dict[int, bool]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split()
            if not s:
                continue
            if len(s) != 7:
                raise ParseError(f"expected 7 fields, got {len(s)}", path, lineno)
            try:
                out[int(s[0])] = bool(int(s[1]))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    return out
