"""Synthetic driving scenes with exact ground truth.

The world has a ground plane at ``z = 0`` (z up), static boxes lining a road
and axis-aligned boxes translating at constant velocity. A pinhole camera at
a fixed height drives along a straight or circular path. Every observation
records its true world position, its noiseless pixel and a dynamic label.
Detector output is emulated by rendering box silhouettes and then corrupting
them (shrinking for recall, spurious blobs for precision).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import CameraIntrinsics, Pose, project_many
from .errors import GenerationError, ParameterError
from .evaluation import KITTI, Trajectory, write_trajectory
from .filtering import PointObservation, write_points
from .masks import CAR, PERSON, DetectionRecord, SegMask, combine_masks, export_mask, rle_encode, write_detections

BOX_FACES = ((0, -1), (0, 1), (1, -1), (1, 1), (2, 1))  # (axis, side); no bottom face
MIN_DEPTH = 0.5
NEAR_CLIP = 0.1
BLOB_RADIUS = 4.0


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    frames: int = 10
    n_static: int = 1500
    n_dynamic: int = 600
    ground_extent: float = 60.0
    road_half_width: float = 9.0
    n_static_boxes: int = 8
    n_bodies: int = 4
    body_size: Tuple[float, float, float] = (4.2, 1.8, 1.5)
    body_speed: Tuple[float, float] = (4.0, 12.0)
    camera_path: str = "straight"
    camera_speed: float = 8.0
    arc_radius: float = 60.0
    camera_height: float = 1.65
    frame_period: float = 0.1
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    pixel_noise: float = 0.5
    max_range: float = 80.0
    precision_target: Optional[float] = None
    recall_target: Optional[float] = None

    def __post_init__(self):
        counts = (self.frames, self.n_static, self.n_dynamic, self.n_static_boxes, self.n_bodies)
        if any(int(c) != c or c < 0 for c in counts):
            raise ParameterError("counts must be non-negative integers")
        if self.camera_path not in ("straight", "arc"):
            raise ParameterError("camera_path must be 'straight' or 'arc'")
        if (self.precision_target is None) != (self.recall_target is None):
            raise ParameterError("give both corruption targets or neither")
        for t in (self.precision_target, self.recall_target):
            if t is not None and not 0.0 < t <= 1.0:
                raise ParameterError("corruption targets must lie in (0, 1]")
        if self.pixel_noise < 0 or self.frame_period <= 0 or self.camera_height <= 0:
            raise ParameterError("noise must be >= 0; period and camera height > 0")
        if self.arc_radius <= 0 or self.ground_extent <= 0 or self.road_half_width <= 0:
            raise ParameterError("path and world extents must be positive")
        lo, hi = self.body_speed
        if not 0 < lo <= hi:
            raise ParameterError("body speeds need 0 < min <= max")
        if min(self.body_size) <= 0:
            raise ParameterError("body sizes must be positive")

    @property
    def corrupted(self):
        return self.precision_target is not None

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def to_json(self):
        d = asdict(self)
        d["body_size"] = list(self.body_size)
        d["body_speed"] = list(self.body_speed)
        return d

    @classmethod
    def from_mapping(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown scene keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("body_size", "body_speed"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)


@dataclass(eq=False)
class SceneFrame:
    frame_id: int
    timestamp: float
    pose: Pose  # camera to world
    observations: List[PointObservation]
    gt_dynamic: np.ndarray
    world_points: np.ndarray
    pixels_true: np.ndarray
    noise: np.ndarray
    body_ids: np.ndarray  # -1 for static points
    silhouettes: Dict[int, np.ndarray]  # body id -> convex polygon (K, 2)
    gt_mask: SegMask
    corrupted_mask: Optional[SegMask] = None
    gt_detections: List[DetectionRecord] = field(default_factory=list)
    detections: List[DetectionRecord] = field(default_factory=list)

    @property
    def world_to_camera(self) -> Pose:
        return self.pose.inverse()


@dataclass(eq=False)
class Scene:
    config: SceneConfig
    frames: List[SceneFrame]
    trajectory: Optional[Trajectory]
    mask_precision: Optional[float] = None
    mask_recall: Optional[float] = None

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)


# --- world construction -------------------------------------------------------

def _path_state(cfg: SceneConfig, s):
    """Position (x, y) and unit heading at arclength ``s``."""
    if cfg.camera_path == "straight":
        return np.array([s, 0.0]), np.array([1.0, 0.0])
    R = cfg.arc_radius
    a = s / R
    return np.array([R * math.sin(a), R * (1.0 - math.cos(a))]), np.array([math.cos(a), math.sin(a)])


def _local_to_world(cfg, s, lateral):
    pos, head = _path_state(cfg, s)
    left = np.array([-head[1], head[0]])
    return pos + lateral * left


def camera_pose(cfg: SceneConfig, t: float) -> Pose:
    """Camera-to-world pose at time ``t`` (x right, y down, z forward)."""
    pos, head = _path_state(cfg, cfg.camera_speed * t)
    f = np.array([head[0], head[1], 0.0])
    right = np.cross(f, [0.0, 0.0, 1.0])
    down = np.cross(f, right)
    R = np.column_stack([right, down, f])
    return Pose(R, np.array([pos[0], pos[1], cfg.camera_height]), t)


@dataclass(frozen=True)
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    velocity: np.ndarray

    def at(self, t):
        off = self.velocity * t
        return self.lo + off, self.hi + off

    def corners(self, t):
        lo, hi = self.at(t)
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def _surface_samples(rng, lo, hi, n):
    """``n`` points uniformly on the five non-bottom faces of a box."""
    size = hi - lo
    areas = np.array([size[(a + 1) % 3] * size[(a + 2) % 3] for a, _ in BOX_FACES])
    face = rng.choice(len(BOX_FACES), size=n, p=areas / areas.sum())
    P = lo + rng.random((n, 3)) * size
    for k, (axis, side) in enumerate(BOX_FACES):
        sel = face == k
        P[sel, axis] = hi[axis] if side > 0 else lo[axis]
    return P


def _build_world(cfg: SceneConfig, rng):
    duration = cfg.frame_period * max(cfg.frames - 1, 0)
    s_end = cfg.camera_speed * duration
    s_lo, s_hi = -5.0, s_end + cfg.ground_extent

    static_boxes = []
    for k in range(cfg.n_static_boxes):
        s = rng.uniform(s_lo, s_hi)
        side = 1.0 if k % 2 == 0 else -1.0
        lateral = side * (cfg.road_half_width + 1.0 + rng.uniform(0.0, 4.0))
        c = _local_to_world(cfg, s, lateral)
        half = rng.uniform(2.0, 5.0, size=2)
        h = rng.uniform(4.0, 12.0)
        static_boxes.append(_Box(np.array([c[0] - half[0], c[1] - half[1], 0.0]),
                                 np.array([c[0] + half[0], c[1] + half[1], h]), np.zeros(3)))

    bodies = []
    n_bodies = cfg.n_bodies if cfg.n_dynamic > 0 else 0
    lanes = (-3.5, 3.5, -7.0, 7.0)
    L, Wd, H = cfg.body_size
    for k in range(n_bodies):
        lateral = lanes[k % len(lanes)]
        s0 = rng.uniform(8.0, 30.0) + 25.0 * (k // len(lanes))
        c = _local_to_world(cfg, s0, lateral)
        _, head = _path_state(cfg, s0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        speed = rng.uniform(*cfg.body_speed)
        v = np.array([head[0], head[1], 0.0]) * sign * speed
        bodies.append(_Box(np.array([c[0] - L / 2, c[1] - Wd / 2, 0.0]),
                           np.array([c[0] + L / 2, c[1] + Wd / 2, H]), v))

    # static points: a share on the ground, the rest on static box faces
    n_ground = cfg.n_static if not static_boxes else cfg.n_static * 3 // 5
    s = rng.uniform(s_lo, s_hi, size=n_ground)
    lat = rng.uniform(-cfg.road_half_width, cfg.road_half_width, size=n_ground)
    ground = np.array([np.append(_local_to_world(cfg, si, li), 0.0) for si, li in zip(s, lat)]).reshape(-1, 3)
    parts = [ground]
    n_rest = cfg.n_static - n_ground
    if static_boxes and n_rest:
        owner = rng.integers(0, len(static_boxes), size=n_rest)
        for k, b in enumerate(static_boxes):
            cnt = int(np.sum(owner == k))
            if cnt:
                parts.append(_surface_samples(rng, b.lo, b.hi, cnt))
    static_pts = np.vstack(parts) if parts else np.zeros((0, 3))

    # dynamic points in body coordinates (offset from the box's lower corner)
    dyn_local, dyn_owner = [], []
    if bodies:
        owner = np.sort(rng.integers(0, len(bodies), size=cfg.n_dynamic))
        for k, b in enumerate(bodies):
            cnt = int(np.sum(owner == k))
            dyn_local.append(_surface_samples(rng, b.lo, b.hi, cnt) - b.lo)
            dyn_owner.append(np.full(cnt, k))
    dyn_local = np.vstack(dyn_local) if dyn_local else np.zeros((0, 3))
    dyn_owner = np.concatenate(dyn_owner) if dyn_owner else np.zeros(0, dtype=int)
    return static_boxes, bodies, static_pts, dyn_local, dyn_owner


# --- visibility --------------------------------------------------------------------

def _occluded(C, P, boxes, eps=1e-4):
    """True where the segment from ``C`` to each point in ``P`` enters a box before the point."""
    D = P - C
    out = np.zeros(len(P), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / D
        for lo, hi in boxes:
            t1 = (lo - C) * inv
            t2 = (hi - C) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            out |= (tmax >= np.maximum(tmin, 0.0)) & (tmin < 1.0 - eps)
    return out


def _silhouette(K, w2c: Pose, corners):
    """Convex image polygon of a box, clipped to the near plane; ``None`` if invisible."""
    Xc = w2c.apply(corners)
    pts = [Xc[i] for i in range(8) if Xc[i, 2] >= NEAR_CLIP]
    for i in range(8):
        for j in range(i + 1, 8):
            if np.count_nonzero(corners[i] != corners[j]) != 1:
                continue  # not an edge
            zi, zj = Xc[i, 2], Xc[j, 2]
            if (zi - NEAR_CLIP) * (zj - NEAR_CLIP) < 0:
                a = (NEAR_CLIP - zi) / (zj - zi)
                pts.append(Xc[i] + a * (Xc[j] - Xc[i]))
    if len(pts) < 3:
        return None
    P = np.array(pts)
    uv = np.column_stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy])
    try:
        hull = ConvexHull(uv)
    except QhullError:
        return None
    return uv[hull.vertices]


def polygon_contains(poly, uv, tol=1e-6, half_pixel=False):
    """Points inside (or within ``tol`` of) a counter-clockwise convex polygon.

    With ``half_pixel`` the test is whether the unit pixel square centred at
    each point touches the polygon.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    inside = np.ones(len(uv), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        cross = e[0] * (uv[:, 1] - a[1]) - e[1] * (uv[:, 0] - a[0])
        slack = 0.5 * (abs(e[0]) + abs(e[1])) if half_pixel else 0.0
        inside &= cross >= -slack - tol * max(float(np.hypot(*e)), 1.0)
    if half_pixel:
        lo, hi = poly.min(axis=0) - 0.5, poly.max(axis=0) + 0.5
        inside &= np.all((uv >= lo) & (uv <= hi), axis=1)
    return inside


def polygon_gauge(poly, uv):
    """Smallest scale about the vertex mean at which the polygon contains each point."""
    c = poly.mean(axis=0)
    q = np.atleast_2d(np.asarray(uv, dtype=float)) - c
    g = np.zeros(len(q))
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        n = np.array([e[1], -e[0]])  # outward for counter-clockwise order
        g = np.maximum(g, (q @ n) / float(n @ (a - c)))
    return g


def rasterize_polygon(poly, width, height, conservative=False):
    """Pixels whose centres (integer coordinates) fall inside the polygon, or with
    ``conservative`` every pixel whose square touches it."""
    out = np.zeros((height, width), dtype=bool)
    if poly is None or len(poly) < 3:
        return out
    pad = 0.5 if conservative else 0.0
    x0 = max(int(math.floor(poly[:, 0].min() - pad)), 0)
    x1 = min(int(math.ceil(poly[:, 0].max() + pad)), width - 1)
    y0 = max(int(math.floor(poly[:, 1].min() - pad)), 0)
    y1 = min(int(math.ceil(poly[:, 1].max() + pad)), height - 1)
    if x1 < x0 or y1 < y0:
        return out
    uu, vv = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
    inside = polygon_contains(poly, np.column_stack([uu.ravel(), vv.ravel()]), tol=0.0, half_pixel=conservative)
    out[y0:y1 + 1, x0:x1 + 1] = inside.reshape(uu.shape)
    return out


def _scaled(poly, s):
    c = poly.mean(axis=0)
    return c + s * (poly - c)


def _detection(frame_id, class_id, name, conf, binary):
    rows, cols = np.nonzero(binary)
    bbox = (float(cols.min()) - 0.5, float(rows.min()) - 0.5,
            float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1))
    return DetectionRecord(frame_id, class_id, name, conf, bbox, mask_rle=tuple(rle_encode(binary)))


def _lookup(binary, uv):
    h, w = binary.shape
    c = np.clip(np.rint(uv[:, 0]).astype(int), 0, w - 1)
    r = np.clip(np.rint(uv[:, 1]).astype(int), 0, h - 1)
    return binary[r, c]


def mask_precision_recall(frames, masks=None):
    """Point-level precision and recall of mask support against the dynamic labels."""
    tp = fp = fn = 0
    for k, f in enumerate(frames):
        m = masks[k] if masks is not None else f.corrupted_mask.support()
        uv = np.array([o.pixel for o in f.observations]).reshape(-1, 2)
        hit = _lookup(m, uv) if len(uv) else np.zeros(0, dtype=bool)
        tp += int(np.sum(hit & f.gt_dynamic))
        fp += int(np.sum(hit & ~f.gt_dynamic))
        fn += int(np.sum(~hit & f.gt_dynamic))
    p = tp / (tp + fp) if tp + fp else None
    r = tp / (tp + fn) if tp + fn else None
    return p, r


# --- generation ----------------------------------------------------------------

def _frame_rng(seed, frame_id):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, 7919, int(frame_id)])


def generate_scene(cfg: SceneConfig) -> Scene:
    """Generate all frames; the seed alone determines the result."""
    K = cfg.intrinsics()
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, 1])
    static_boxes, bodies, static_pts, dyn_local, dyn_owner = _build_world(cfg, rng)
    n_s = len(static_pts)
    frames: List[SceneFrame] = []
    for fid in range(cfg.frames):
        t = fid * cfg.frame_period
        c2w = camera_pose(cfg, t)
        w2c = c2w.inverse()
        body_boxes = [b.at(t) for b in bodies]
        dyn_world = np.array([body_boxes[o][0] for o in dyn_owner]).reshape(-1, 3) + dyn_local
        P = np.vstack([static_pts, dyn_world])
        ids = np.arange(len(P))
        owner = np.concatenate([np.full(n_s, -1), dyn_owner]).astype(int)
        uv, depth = project_many(K, w2c, P)
        rng_f = _frame_rng(cfg.seed, fid)
        noise = rng_f.normal(0.0, cfg.pixel_noise, size=(len(P), 2)) if cfg.pixel_noise > 0 else np.zeros((len(P), 2))
        ok = (depth > MIN_DEPTH) & (np.linalg.norm(P - c2w.t, axis=1) <= cfg.max_range)
        with np.errstate(invalid="ignore"):
            ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
        boxes = [(b.lo, b.hi) for b in static_boxes] + body_boxes
        cand = np.flatnonzero(ok)
        vis = cand[~_occluded(c2w.t, P[cand], boxes)]
        if len(vis) == 0:
            raise GenerationError(f"frame {fid} has no visible points; widen the field of view or add points")
        obs_uv = uv[vis] + noise[vis]
        obs_uv[:, 0] = np.clip(obs_uv[:, 0], 0.0, K.width - 1)
        obs_uv[:, 1] = np.clip(obs_uv[:, 1], 0.0, K.height - 1)
        Xc = w2c.apply(P[vis])
        obs = [PointObservation(int(ids[i]), (float(obs_uv[j, 0]), float(obs_uv[j, 1])), Xc[j].copy(), fid)
               for j, i in enumerate(vis)]

        silhouettes = {}
        gt_dets = []
        for k, b in enumerate(bodies):
            poly = _silhouette(K, w2c, b.corners(t))
            if poly is None:
                continue
            # every pixel the silhouette touches, so rounded lookups of its points always hit
            raster = rasterize_polygon(poly, K.width, K.height, conservative=True)
            if not raster.any():
                continue
            silhouettes[k] = poly
            gt_dets.append(_detection(fid, CAR, "car", 1.0, raster))
        frames.append(SceneFrame(
            frame_id=fid, timestamp=t, pose=c2w, observations=obs,
            gt_dynamic=owner[vis] >= 0, world_points=P[vis], pixels_true=uv[vis],
            noise=obs_uv - uv[vis], body_ids=owner[vis], silhouettes=silhouettes,
            gt_mask=combine_masks(gt_dets, None, K.width, K.height), gt_detections=gt_dets,
        ))

    traj = Trajectory(tuple(f.pose for f in frames), KITTI) if frames else None
    scene = Scene(cfg, frames, traj)
    if cfg.corrupted:
        _corrupt(scene, rng)
    else:
        for f in frames:
            f.corrupted_mask = f.gt_mask
            f.detections = list(f.gt_detections)
    return scene


def _corrupt(scene: Scene, rng):
    """Shrink silhouettes to reach the recall target, then add blobs on static
    points to bring precision down to its target."""
    cfg = scene.config
    W, H = cfg.width, cfg.height
    frames = scene.frames
    n_dyn = sum(int(f.gt_dynamic.sum()) for f in frames)
    if n_dyn == 0:
        for f in frames:
            f.corrupted_mask = f.gt_mask
            f.detections = []
        return

    uvs = [np.array([o.pixel for o in f.observations]).reshape(-1, 2) for f in frames]

    def body_rasters(s):
        return [{k: rasterize_polygon(_scaled(poly, s), W, H) for k, poly in f.silhouettes.items()} for f in frames]

    def union(rasters):
        out = []
        for r in rasters:
            m = np.zeros((H, W), dtype=bool)
            for b in r.values():
                m |= b
            out.append(m)
        return out

    # smallest silhouette scale that still covers each dynamic point's pixel centre
    need = []
    for f, uv in zip(frames, uvs):
        sel = f.gt_dynamic
        g = np.full(int(sel.sum()), np.inf)
        for poly in f.silhouettes.values():
            g = np.minimum(g, polygon_gauge(poly, np.rint(uv[sel])))
        need.append(g)
    need = np.sort(np.concatenate(need))
    k = min(max(int(math.ceil(cfg.recall_target * len(need) - 1e-9)) - 1, 0), len(need) - 1)
    s = float(np.clip(need[k] * (1.0 + 1e-9), 0.02, 1.6)) if np.isfinite(need[k]) else 1.6
    rasters = body_rasters(s)
    base = union(rasters)

    # blobs: discs around randomly ordered static observations, added one at a time
    covered = [_lookup(m, uv) if len(uv) else np.zeros(0, dtype=bool) for m, uv in zip(base, uvs)]
    tp = sum(int(np.sum(c & f.gt_dynamic)) for c, f in zip(covered, frames))
    fp = sum(int(np.sum(c & ~f.gt_dynamic)) for c, f in zip(covered, frames))
    cands = [(k, j) for k, f in enumerate(frames) for j in np.flatnonzero(~f.gt_dynamic)]
    order = rng.permutation(len(cands)) if cands else []
    blobs: Dict[int, List[np.ndarray]] = {}
    target_p = cfg.precision_target

    def prec(tp_, fp_):
        return tp_ / (tp_ + fp_) if tp_ + fp_ else 1.0

    for idx in order:
        if prec(tp, fp) <= target_p:
            break
        k, j = cands[idx]
        c = uvs[k][j]
        centres = blobs.get(k, [])
        if covered[k][j] or any(np.hypot(*(c - o)) < 2.0 * BLOB_RADIUS + 1.0 for o in centres):
            continue
        # new coverage judged on rounded pixels, as in the lookup
        ru = np.rint(uvs[k])
        inside = (ru[:, 0] - np.rint(c[0])) ** 2 + (ru[:, 1] - np.rint(c[1])) ** 2 <= BLOB_RADIUS ** 2
        new = inside & ~covered[k]
        new_tp = int(np.sum(new & frames[k].gt_dynamic))
        new_fp = int(np.sum(new & ~frames[k].gt_dynamic))
        # keep whichever side of the target is closer
        if abs(prec(tp + new_tp, fp + new_fp) - target_p) > abs(prec(tp, fp) - target_p):
            break
        tp, fp = tp + new_tp, fp + new_fp
        covered[k] = covered[k] | new
        blobs.setdefault(k, []).append(np.rint(c))

    for k, f in enumerate(frames):
        dets = []
        for b in sorted(rasters[k]):
            if rasters[k][b].any():
                dets.append(_detection(f.frame_id, CAR, "car", 0.9, rasters[k][b]))
        for c in blobs.get(k, []):
            vv, uu = np.mgrid[0:H, 0:W]
            disc = (uu - c[0]) ** 2 + (vv - c[1]) ** 2 <= BLOB_RADIUS ** 2
            dets.append(_detection(f.frame_id, PERSON, "person", 0.8, disc))
        f.detections = dets
        f.corrupted_mask = combine_masks(dets, None, W, H)
    scene.mask_precision, scene.mask_recall = mask_precision_recall(frames)


# --- export ---------------------------------------------------------------------

def _atomic_json(path, obj):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def export_scene(scene: Scene, directory) -> Dict[str, str]:
    """Write the scene in the formats the pipeline reads; returns ``{relative path: sha256}``."""
    cfg = scene.config
    directory = os.fspath(directory)
    try:
        os.makedirs(directory, exist_ok=True)
        written = []
        if scene.frames:
            for sub in ("points", "masks"):
                os.makedirs(os.path.join(directory, sub), exist_ok=True)
            det_all, det_gt = [], []
            labels = []
            for f in scene.frames:
                name = "%06d" % f.frame_id
                rel = os.path.join("points", name + ".txt")
                write_points(os.path.join(directory, rel), f.observations)
                written.append(rel)
                for stem, m in (("gt_", f.gt_mask), ("det_", f.corrupted_mask)):
                    b = os.path.join("masks", stem + name + ".pgm")
                    c = os.path.join("masks", stem + name + "_conf.pgm")
                    export_mask(m, os.path.join(directory, b), os.path.join(directory, c))
                    written += [b, c]
                det_all += f.detections
                det_gt += f.gt_detections
                labels += ["%d %d %d\n" % (o.track_id, f.frame_id, int(d)) for o, d in zip(f.observations, f.gt_dynamic)]
            write_detections(os.path.join(directory, "detections.jsonl"), det_all)
            write_detections(os.path.join(directory, "detections_gt.jsonl"), det_gt)
            with open(os.path.join(directory, "labels.txt"), "w", encoding="utf-8") as fh:
                fh.writelines(labels)
            write_trajectory(os.path.join(directory, "gt_poses.txt"), scene.trajectory, KITTI)
            with open(os.path.join(directory, "times.txt"), "w", encoding="utf-8") as fh:
                fh.writelines(repr(float(f.timestamp)) + "\n" for f in scene.frames)
            with open(os.path.join(directory, "pipeline.toml"), "w", encoding="utf-8") as fh:
                for key in ("fx", "fy", "cx", "cy"):
                    fh.write(f"{key} = {float(getattr(cfg, key))!r}\n")
                fh.write(f"width = {cfg.width}\nheight = {cfg.height}\n")
                fh.write(f"frame_period = {float(cfg.frame_period)!r}\n")
                fh.write(f"camera_height = {float(cfg.camera_height)!r}\n")
                fh.write(f"seed = {cfg.seed}\n")
            written += ["detections.jsonl", "detections_gt.jsonl", "labels.txt", "gt_poses.txt", "times.txt",
                        "pipeline.toml"]
        hashes = {rel.replace(os.sep, "/"): _sha256(os.path.join(directory, rel)) for rel in sorted(written)}
        manifest = {
            "config": cfg.to_json(),
            "seed": cfg.seed,
            "frames": len(scene.frames),
            "points_per_frame": [len(f.observations) for f in scene.frames],
            "mask_precision": scene.mask_precision,
            "mask_recall": scene.mask_recall,
            "files": hashes,
        }
        _atomic_json(os.path.join(directory, "manifest.json"), manifest)
    except OSError as exc:
        raise OSError(f"export to {directory} failed: {exc}") from exc
    return hashes
