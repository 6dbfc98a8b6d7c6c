"""Detection post-processing: confidence gating, NMS, mask combination and
morphological refinement, plus image normalisation and mask file I/O."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ParseError

log = logging.getLogger(__name__)

FAST_DYNAMIC = "fast-dynamic"
SLOW_DYNAMIC = "slow-dynamic"
STATIC = "static"
SKY = "sky"
CATEGORIES = (FAST_DYNAMIC, SLOW_DYNAMIC, STATIC, SKY)
DYNAMIC_CATEGORIES = (FAST_DYNAMIC, SLOW_DYNAMIC)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SKY_CLASS_ID = 200


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    frame_id: int
    class_id: int
    class_name: str
    confidence: float
    bbox: tuple  # (x, y, w, h) in pixels
    mask: Optional[np.ndarray] = None  # bool bitmap, bbox-sized
    mask_rle: Optional[tuple] = None  # full-frame run lengths, background first

    def __post_init__(self):
        if int(self.class_id) < 1:
            raise ParameterError("class id 0 is reserved for background; ids start at 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ParameterError(f"confidence {self.confidence} outside [0, 1]")
        x, y, w, h = (float(v) for v in self.bbox)
        if w < 0 or h < 0:
            raise ParameterError("bbox width and height must be non-negative")
        object.__setattr__(self, "bbox", (x, y, w, h))

    def pixel_box(self, width, height):
        """Integer pixel window ``(x0, y0, x1, y1)`` (exclusive ends), clamped."""
        x, y, w, h = self.bbox
        x0 = min(max(int(math.floor(x)), 0), width)
        y0 = min(max(int(math.floor(y)), 0), height)
        x1 = min(max(int(math.ceil(x + w)), 0), width)
        y1 = min(max(int(math.ceil(y + h)), 0), height)
        return x0, y0, x1, y1

    def coverage(self, width, height):
        """Boolean ``(height, width)`` array of pixels this detection covers."""
        if self.mask_rle is not None:
            return rle_decode(self.mask_rle, width, height)
        out = np.zeros((height, width), dtype=bool)
        x0, y0, x1, y1 = self.pixel_box(width, height)
        if x1 <= x0 or y1 <= y0:
            return out
        if self.mask is None:
            out[y0:y1, x0:x1] = True
            return out
        # bitmap is anchored at floor(x), floor(y); clip to the image
        bx = int(math.floor(self.bbox[0]))
        by = int(math.floor(self.bbox[1]))
        m = np.asarray(self.mask, dtype=bool)
        out[y0:y1, x0:x1] = m[y0 - by:y1 - by, x0 - bx:x1 - bx]
        return out


@dataclass(frozen=True, eq=False)
class SegMask:
    dynamic_confidence: np.ndarray
    class_map: np.ndarray
    sky: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.dynamic_confidence, dtype=np.float64)
        cls = np.asarray(self.class_map, dtype=np.int32)
        sky = np.asarray(self.sky, dtype=bool)
        if not (conf.shape == cls.shape == sky.shape) or conf.ndim != 2:
            raise ParameterError("mask layers must share one 2-D shape")
        if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
            raise ParameterError("dynamic confidence outside [0, 1]")
        if np.any((cls == 0) & (conf != 0.0)):
            raise ParameterError("background pixels must have zero dynamic confidence")
        for a in (conf, cls, sky):
            a.flags.writeable = False
        object.__setattr__(self, "dynamic_confidence", conf)
        object.__setattr__(self, "class_map", cls)
        object.__setattr__(self, "sky", sky)

    @classmethod
    def empty(cls, width, height):
        return cls(
            np.zeros((height, width)),
            np.zeros((height, width), dtype=np.int32),
            np.zeros((height, width), dtype=bool),
        )

    @property
    def width(self):
        return self.dynamic_confidence.shape[1]

    @property
    def height(self):
        return self.dynamic_confidence.shape[0]

    def support(self):
        return self.dynamic_confidence >= 0.5


# 1-based COCO category ids (0 is background in the class map), plus sky
PERSON, BICYCLE, CAR = 1, 2, 3
DEFAULT_CLASS_CATEGORIES = {
    1: SLOW_DYNAMIC,  # person
    2: FAST_DYNAMIC,  # bicycle
    3: FAST_DYNAMIC,  # car
    4: FAST_DYNAMIC,  # motorcycle
    6: FAST_DYNAMIC,  # bus
    7: FAST_DYNAMIC,  # train
    8: FAST_DYNAMIC,  # truck
    16: SLOW_DYNAMIC,  # bird
    17: SLOW_DYNAMIC,  # cat
    18: SLOW_DYNAMIC,  # dog
    19: SLOW_DYNAMIC,  # horse
    SKY_CLASS_ID: SKY,
}


@dataclass
class ClassPolicy:
    categories: Dict[int, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_CATEGORIES))
    thresholds: Dict[str, float] = field(default_factory=lambda: {c: 0.0 for c in CATEGORIES})
    _warned: set = field(default_factory=set, repr=False, compare=False)

    def category(self, class_id: int) -> str:
        cat = self.categories.get(int(class_id))
        if cat is None:
            if class_id not in self._warned:
                log.warning("unknown class id %d treated as static", class_id)
                self._warned.add(class_id)
            return STATIC
        return cat

    def is_dynamic(self, class_id) -> bool:
        return self.category(class_id) in DYNAMIC_CATEGORIES

    def accepts(self, det: DetectionRecord) -> bool:
        return det.confidence >= self.thresholds.get(self.category(det.class_id), 0.0)


def normalize_image(image, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel standardisation ``(image - mean) / std`` of an ``H x W x 3`` array."""
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ParameterError("std components must be positive")
    return (np.asarray(image, dtype=float) - np.asarray(mean, dtype=float)) / std


def filter_by_confidence(dets: Sequence[DetectionRecord], conf_threshold: float) -> List[DetectionRecord]:
    return [d for d in dets if d.confidence >= conf_threshold]


def box_iou(a, b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Sequence[DetectionRecord], nms_threshold: float, class_aware: bool = True) -> List[DetectionRecord]:
    """Greedy NMS; returns survivors in descending confidence (input order on ties)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: List[DetectionRecord] = []
    for i in order:
        d = dets[i]
        if any(
            (not class_aware or k.class_id == d.class_id) and box_iou(k.bbox, d.bbox) > nms_threshold
            for k in kept
        ):
            continue
        kept.append(d)
    return kept


def combine_masks(dets: Iterable[DetectionRecord], policy: Optional[ClassPolicy], width: int, height: int) -> SegMask:
    """Per-pixel max of dynamic confidences over covering detections.

    Each pixel's class is taken from its strongest contributor, ranked by
    (dynamic confidence, raw confidence, lower class id) so the result does
    not depend on detection order.
    """
    policy = policy or ClassPolicy()
    conf = np.zeros((height, width))
    raw = np.full((height, width), -1.0)
    cls = np.zeros((height, width), dtype=np.int32)
    sky = np.zeros((height, width), dtype=bool)
    for d in dets:
        if not policy.accepts(d):
            continue
        full = d.coverage(width, height)
        win = _content_window(full, 0)
        if win is None:
            continue
        cov = full[win]
        cat = policy.category(d.class_id)
        if cat == SKY:
            sky[win] |= cov
        dyn = d.confidence if cat in DYNAMIC_CATEGORIES else 0.0
        c, r, k = conf[win], raw[win], cls[win]
        better = cov & (
            (dyn > c)
            | ((dyn == c) & (d.confidence > r))
            | ((dyn == c) & (d.confidence == r) & ((k == 0) | (d.class_id < k)))
        )
        c[better] = dyn
        r[better] = d.confidence
        k[better] = d.class_id
    conf[cls == 0] = 0.0
    return SegMask(conf, cls, sky)


def _erode(b, r):
    if r <= 0:
        return b
    return ndimage.minimum_filter(b.view(np.uint8), size=2 * r + 1, mode="nearest").astype(bool)


def _dilate(b, r):
    if r <= 0:
        return b
    return ndimage.maximum_filter(b.view(np.uint8), size=2 * r + 1, mode="nearest").astype(bool)


def _majority(b):
    # a pixel flips only when at least 6 of its 8 neighbours disagree
    counts = ndimage.correlate(b.astype(np.int16), np.ones((3, 3), dtype=np.int16), mode="nearest")
    neighbours = counts - b
    out = b.copy()
    out[b & (neighbours <= 2)] = False
    out[~b & (neighbours >= 6)] = True
    return out


def _content_window(binary, margin):
    """Slices of the bounding box of ``binary`` grown by ``margin``, or None if empty."""
    rows = np.flatnonzero(binary.any(axis=1))
    if len(rows) == 0:
        return None
    cols = np.flatnonzero(binary.any(axis=0))
    H, W = binary.shape
    return (slice(max(rows[0] - margin, 0), min(rows[-1] + margin + 1, H)),
            slice(max(cols[0] - margin, 0), min(cols[-1] + margin + 1, W)))


def _window_margin(open_radius, close_radius):
    # support never leaves its bounding box, and intermediate dilations reach
    # at most max(r) beyond it, so results match full-frame processing exactly
    return 2 * (open_radius + close_radius) + 4


def refine_support(binary, open_radius=1, close_radius=1, max_rounds=32):
    """Open, close and majority-smooth a binary mask, repeated to a fixed point."""
    if open_radius < 0 or close_radius < 0:
        raise ParameterError("morphology radii must be non-negative")
    full = np.asarray(binary, dtype=bool)
    out = np.zeros_like(full)
    win = _content_window(full, _window_margin(open_radius, close_radius))
    if win is None:
        return out
    cur = full[win]
    for _ in range(max_rounds):
        nxt = _majority(_erode(_dilate(_dilate(_erode(cur, open_radius), open_radius), close_radius), close_radius))
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    else:
        log.warning("mask refinement did not reach a fixed point in %d rounds", max_rounds)
    out[win] = cur
    return out


def _fill_confidence(conf0, cls0, support0, support):
    conf = np.where(support & support0, conf0, 0.0)
    cls = np.where(support & support0, cls0, 0).astype(np.int32)
    todo = support & ~support0
    while todo.any():
        best = np.zeros_like(conf)
        best_cls = np.zeros_like(cls)
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            c = _shift(conf, dy, dx)
            k = _shift(cls, dy, dx)
            take = (c > best) | ((c == best) & (c > 0) & ((best_cls == 0) | (k < best_cls)))
            best = np.where(take, c, best)
            best_cls = np.where(take, k, best_cls)
        ready = todo & (best > 0)
        if not ready.any():
            break
        conf[ready] = best[ready]
        cls[ready] = best_cls[ready]
        todo &= ~ready
    return conf, cls


def refine_mask(mask: SegMask, open_radius: int = 1, close_radius: int = 1) -> SegMask:
    """Morphological clean-up of the dynamic support of ``mask``.

    Pixels that survive keep their confidence; pixels added by closing take the
    maximum confidence of their already-assigned 4-neighbours, propagated
    inwards until every support pixel is assigned.
    """
    support0 = mask.dynamic_confidence >= 0.5
    support = refine_support(support0, open_radius, close_radius)
    conf = np.zeros(support0.shape)
    cls = np.zeros(support0.shape, dtype=np.int32)
    win = _content_window(support0, _window_margin(open_radius, close_radius))
    if win is not None:
        conf[win], cls[win] = _fill_confidence(mask.dynamic_confidence[win], mask.class_map[win],
                                               support0[win], support[win])
    # non-dynamic classes (static objects) stay labelled outside the support
    keep_static = (cls == 0) & (mask.dynamic_confidence == 0) & (mask.class_map != 0)
    cls[keep_static] = mask.class_map[keep_static]
    return SegMask(conf, cls, mask.sky.copy())


def _shift(a, dy, dx):
    out = np.zeros_like(a)
    H, W = a.shape
    ys = slice(max(dy, 0), H + min(dy, 0))
    yd = slice(max(-dy, 0), H + min(-dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    xd = slice(max(-dx, 0), W + min(-dx, 0))
    out[ys, xs] = a[yd, xd]
    return out


def downscale_mask(mask: SegMask, factor: int) -> SegMask:
    if factor == 1:
        return mask
    return SegMask(
        mask.dynamic_confidence[::factor, ::factor],
        mask.class_map[::factor, ::factor],
        mask.sky[::factor, ::factor],
    )


def upscale_mask(mask: SegMask, factor: int, width: int, height: int) -> SegMask:
    if factor == 1:
        return mask
    rep = lambda a: np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)[:height, :width]
    return SegMask(rep(mask.dynamic_confidence), rep(mask.class_map), rep(mask.sky))


def build_segmask(dets, width, height, conf_threshold=0.25, nms_threshold=0.45, class_aware=True,
                  open_radius=1, close_radius=1, policy=None, scale=1) -> SegMask:
    """Full post-processing chain: gate, suppress, combine, refine."""
    kept = nms(filter_by_confidence(dets, conf_threshold), nms_threshold, class_aware)
    combined = combine_masks(kept, policy, width, height)
    if scale == 1:
        return refine_mask(combined, open_radius, close_radius)
    small = refine_mask(downscale_mask(combined, scale), open_radius, close_radius)
    return upscale_mask(small, scale, width, height)


# --- run-length encoding -------------------------------------------------

def rle_encode(binary) -> List[int]:
    """Row-major run lengths alternating background/foreground, background first."""
    flat = np.asarray(binary, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, width, height):
    total = width * height
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs) or sum(runs) > total:
        raise ParameterError("run lengths exceed the frame")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2 == 1:
            flat[pos:pos + r] = True
        pos += r
    return flat.reshape(height, width)


# --- files -----------------------------------------------------------------

def detection_to_json(det: DetectionRecord) -> dict:
    rec = {
        "frame": int(det.frame_id),
        "class_id": int(det.class_id),
        "class_name": det.class_name,
        "conf": float(det.confidence),
        "bbox": [float(v) for v in det.bbox],
    }
    if det.mask_rle is not None:
        rec["mask_rle"] = [int(r) for r in det.mask_rle]
    return rec


def write_detections(path, dets: Iterable[DetectionRecord]):
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(detection_to_json(d), separators=(",", ":")) + "\n")


def read_detections(path) -> Dict[int, List[DetectionRecord]]:
    """Parse a JSON Lines detection file into ``{frame_id: [records]}``."""
    out: Dict[int, List[DetectionRecord]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = DetectionRecord(
                    frame_id=int(rec["frame"]),
                    class_id=int(rec["class_id"]),
                    class_name=str(rec.get("class_name", "")),
                    confidence=float(rec["conf"]),
                    bbox=tuple(float(v) for v in rec["bbox"]),
                    mask_rle=tuple(int(r) for r in rec["mask_rle"]) if rec.get("mask_rle") is not None else None,
                )
                if len(det.bbox) != 4:
                    raise ValueError("bbox needs 4 values")
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad detection record ({exc})", path, lineno) from None
            out.setdefault(det.frame_id, []).append(det)
    return out


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ParseError("only 8-bit binary PGM (P5) is supported", path)
    w, h = int(parts[1]), int(parts[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def export_mask(mask: SegMask, binary_path, confidence_path):
    write_pgm(binary_path, np.where(mask.support(), 255, 0))
    write_pgm(confidence_path, np.rint(255.0 * mask.dynamic_confidence))
