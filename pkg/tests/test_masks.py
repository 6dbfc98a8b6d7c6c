import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynfilter.errors import ParameterError, ParseError
from dynfilter.masks import (
    CAR,
    PERSON,
    SKY_CLASS_ID,
    ClassPolicy,
    DetectionRecord,
    SegMask,
    box_iou,
    build_segmask,
    combine_masks,
    export_mask,
    filter_by_confidence,
    nms,
    normalize_image,
    read_detections,
    read_pgm,
    refine_mask,
    refine_support,
    rle_decode,
    rle_encode,
    write_detections,
)


def det(conf, bbox, cls=CAR, frame=0, **kw):
    return DetectionRecord(frame, cls, "obj", conf, bbox, **kw)


def mask_from(conf, cls_id=CAR):
    conf = np.asarray(conf, dtype=float)
    cls = np.where(conf > 0, cls_id, 0).astype(np.int32)
    return SegMask(conf, cls, np.zeros(conf.shape, dtype=bool))


# --- records and normalisation ------------------------------------------------------

def test_record_validation():
    with pytest.raises(ParameterError):
        det(1.2, (0, 0, 1, 1))
    with pytest.raises(ParameterError):
        det(0.5, (0, 0, -1, 1))
    with pytest.raises(ParameterError):
        det(0.5, (0, 0, 1, 1), cls=0)


def test_segmask_invariants():
    with pytest.raises(ParameterError):
        SegMask(np.full((2, 2), 0.5), np.zeros((2, 2), dtype=np.int32), np.zeros((2, 2), dtype=bool))
    with pytest.raises(ParameterError):
        SegMask(np.full((2, 2), 1.5), np.ones((2, 2), dtype=np.int32), np.zeros((2, 2), dtype=bool))


def test_normalize_image_examples():
    mean, std = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
    assert np.allclose(normalize_image(np.array(mean).reshape(1, 1, 3)), 0.0)
    assert np.allclose(normalize_image((np.array(mean) + np.array(std)).reshape(1, 1, 3)), 1.0)
    img = np.array([0.5, 0.75, 0.5]).reshape(1, 1, 3)
    out = normalize_image(img, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    assert np.allclose(out.ravel(), [0.0, 1.0, 0.0])
    with pytest.raises(ParameterError):
        normalize_image(img, std=(0.2, 0.0, 0.2))


# --- confidence gating and NMS ----------------------------------------------------

def test_filter_by_confidence_examples():
    ds = [det(c, (0, 0, 1, 1)) for c in (0.9, 0.4, 0.6)]
    assert [d.confidence for d in filter_by_confidence(ds, 0.5)] == [0.9, 0.6]
    assert filter_by_confidence(ds, 0.0) == ds
    assert filter_by_confidence(ds, 1.0) == []
    assert filter_by_confidence(ds, 0.6)[-1].confidence == 0.6  # ties kept


@given(st.lists(st.floats(0, 1), max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_filter_by_confidence_composes(confs, t1, t2):
    lo, hi = sorted((t1, t2))
    ds = [det(c, (0, 0, 1, 1)) for c in confs]
    assert filter_by_confidence(filter_by_confidence(ds, lo), hi) == filter_by_confidence(ds, hi)


def test_nms_examples():
    a, b = det(0.9, (0, 0, 10, 10)), det(0.8, (0, 0, 10, 10))
    assert nms([b, a], 0.45) == [a]
    c = det(0.8, (50, 50, 5, 5))
    assert nms([a, c], 0.45) == [a, c]
    p, q = det(0.9, (0, 0, 10, 10)), det(0.8, (5, 0, 10, 10))
    assert box_iou(p.bbox, q.bbox) == pytest.approx(1 / 3)
    assert nms([p, q], 0.3) == [p]
    assert nms([p, q], 0.5) == [p, q]


def test_nms_per_class_and_ties():
    p, q = det(0.9, (0, 0, 10, 10), cls=CAR), det(0.8, (0, 0, 10, 10), cls=PERSON)
    assert nms([p, q], 0.45) == [p, q]
    assert nms([p, q], 0.45, class_aware=False) == [p]
    x, y = det(0.7, (0, 0, 10, 10)), det(0.7, (1, 0, 10, 10))
    assert nms([x, y], 0.45) == [x]
    assert nms([y, x], 0.45) == [y]


# --- combine -------------------------------------------------------------------------

def test_combine_single_block():
    m = combine_masks([det(0.8, (2, 3, 4, 4))], None, 10, 10)
    assert np.count_nonzero(m.dynamic_confidence == 0.8) == 16
    assert np.count_nonzero(m.dynamic_confidence) == 16
    assert m.dynamic_confidence[3:7, 2:6].min() == 0.8


def test_combine_overlap_takes_max():
    m = combine_masks([det(0.6, (0, 0, 6, 6)), det(0.9, (3, 3, 6, 6), cls=PERSON)], None, 10, 10)
    assert m.dynamic_confidence[4, 4] == 0.9
    assert m.class_map[4, 4] == PERSON
    assert m.dynamic_confidence[1, 1] == 0.6


def test_combine_static_and_sky():
    pol = ClassPolicy()
    m = combine_masks([det(0.9, (0, 0, 5, 5), cls=60), det(0.7, (0, 5, 10, 5), cls=SKY_CLASS_ID)], pol, 10, 10)
    assert not m.dynamic_confidence.any()
    assert (m.class_map[:5, :5] == 60).all()
    assert m.sky[5:, :].all() and not m.sky[:5].any()


def test_combine_bitmap_and_rle_forms():
    bitmap = np.array([[1, 0], [1, 1]], dtype=bool)
    m1 = combine_masks([det(0.9, (3, 4, 2, 2), mask=bitmap)], None, 8, 8)
    full = np.zeros((8, 8), dtype=bool)
    full[4:6, 3:5] = bitmap
    assert np.array_equal(m1.support(), full)
    m2 = combine_masks([det(0.9, (3, 4, 2, 2), mask_rle=tuple(rle_encode(full)))], None, 8, 8)
    assert np.array_equal(m2.dynamic_confidence, m1.dynamic_confidence)


def _random_dets(rng, n, W=40, H=30):
    out = []
    for _ in range(n):
        x, y = rng.uniform(-5, W), rng.uniform(-5, H)
        cls = int(rng.choice([CAR, PERSON, 60, SKY_CLASS_ID]))
        out.append(det(float(np.round(rng.uniform(0, 1), 2)), (x, y, rng.uniform(0, 20), rng.uniform(0, 20)), cls=cls))
    return out


@given(st.integers(0, 2**31 - 1))
def test_combine_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ds = _random_dets(rng, 8)
    ref = combine_masks(ds, None, 40, 30)
    shuffled = list(ds)
    random.Random(seed).shuffle(shuffled)
    got = combine_masks(shuffled, None, 40, 30)
    assert np.array_equal(ref.dynamic_confidence, got.dynamic_confidence)
    assert np.array_equal(ref.class_map, got.class_map)
    assert np.array_equal(ref.sky, got.sky)


@given(st.integers(0, 2**31 - 1))
def test_combine_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    ds = _random_dets(rng, 5, W=12, H=9)
    pol = ClassPolicy()
    m = combine_masks(ds, pol, 12, 9)
    covs = [d.coverage(12, 9) for d in ds]
    for y in range(9):
        for x in range(12):
            vals = [d.confidence if pol.is_dynamic(d.class_id) else 0.0 for d, c in zip(ds, covs) if c[y, x]]
            assert m.dynamic_confidence[y, x] == (max(vals) if vals else 0.0)
            assert m.sky[y, x] == any(c[y, x] and pol.category(d.class_id) == "sky" for d, c in zip(ds, covs))


# --- refinement ------------------------------------------------------------------

def test_refine_removes_singleton():
    conf = np.zeros((20, 20))
    conf[10, 10] = 0.9
    assert not refine_mask(mask_from(conf)).support().any()


def test_refine_keeps_solid_block():
    conf = np.zeros((30, 30))
    conf[10:20, 5:15] = 0.7
    out = refine_mask(mask_from(conf))
    assert np.array_equal(out.dynamic_confidence, conf)


def test_refine_fills_unit_hole_with_neighbour_max():
    conf = np.zeros((30, 30))
    conf[10:20, 10:20] = 0.6
    conf[14, 15] = 0.8
    conf[15, 15] = 0.0
    cls = np.where(conf > 0, CAR, 0).astype(np.int32)
    out = refine_mask(SegMask(conf, cls, np.zeros((30, 30), dtype=bool)), 1, 1)
    assert out.dynamic_confidence[15, 15] == 0.8
    assert out.class_map[15, 15] == CAR


def test_refine_negative_radius():
    with pytest.raises(ParameterError):
        refine_support(np.zeros((4, 4), dtype=bool), -1, 1)


@given(st.integers(0, 2**31 - 1), st.integers(0, 2), st.integers(0, 2))
def test_refine_idempotent(seed, ro, rc):
    rng = np.random.default_rng(seed)
    conf = (rng.random((24, 24)) < rng.uniform(0.2, 0.7)) * rng.uniform(0.5, 1.0)
    once = refine_mask(mask_from(conf), ro, rc)
    twice = refine_mask(once, ro, rc)
    assert np.array_equal(once.support(), twice.support())


@given(st.integers(0, 2**31 - 1))
def test_refine_window_matches_full_frame(seed):
    # windowed refinement equals the whole-image morphology chain
    from dynfilter import masks as M
    rng = np.random.default_rng(seed)
    b = np.zeros((40, 40), dtype=bool)
    y, x = rng.integers(0, 30, 2)
    b[y:y + 10, x:x + 10] = rng.random((10, 10)) < 0.7
    cur = b
    for _ in range(32):
        nxt = M._majority(M._erode(M._dilate(M._dilate(M._erode(cur, 1), 1), 1), 1))
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    assert np.array_equal(refine_support(b, 1, 1), cur)


def test_build_segmask_scales():
    ds = [det(0.9, (8, 8, 16, 16))]
    full = build_segmask(ds, 40, 40)
    half = build_segmask(ds, 40, 40, scale=2)
    assert full.support()[8:24, 8:24].all()
    assert half.dynamic_confidence.shape == (40, 40)
    assert half.support().sum() == pytest.approx(full.support().sum(), rel=0.2)


# --- RLE and files --------------------------------------------------------------------

@given(st.integers(0, 2**31 - 1))
def test_rle_round_trip(seed):
    rng = np.random.default_rng(seed)
    b = rng.random((7, 9)) < 0.4
    runs = rle_encode(b)
    assert sum(runs) == b.size
    assert np.array_equal(rle_decode(runs, 9, 7), b)


def test_rle_starts_with_background():
    b = np.ones((2, 2), dtype=bool)
    assert rle_encode(b) == [0, 4]
    with pytest.raises(ParameterError):
        rle_decode([3, 5], 2, 2)


def test_detection_file_round_trip(tmp_path):
    full = np.zeros((6, 6), dtype=bool)
    full[1:3, 2:4] = True
    ds = [det(0.5, (1, 2, 3, 4), frame=3), det(0.75, (0, 0, 6, 6), cls=PERSON, frame=5, mask_rle=tuple(rle_encode(full)))]
    path = tmp_path / "d.jsonl"
    write_detections(path, ds)
    back = read_detections(path)
    assert sorted(back) == [3, 5]
    assert back[5][0].mask_rle == tuple(rle_encode(full))
    assert back[3][0].bbox == (1.0, 2.0, 3.0, 4.0)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"frame", "class_id", "class_name", "conf", "bbox"}


def test_detection_file_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"frame": 0, "class_id": 3, "conf": 0.5, "bbox": [0,0,1,1]}\n{"frame": 1}\n')
    with pytest.raises(ParseError) as exc:
        read_detections(path)
    assert "2" in str(exc.value)


def test_export_mask_pgm(tmp_path):
    conf = np.zeros((4, 5))
    conf[1:3, 1:4] = 0.6
    m = mask_from(conf)
    export_mask(m, tmp_path / "b.pgm", tmp_path / "c.pgm")
    b, c = read_pgm(tmp_path / "b.pgm"), read_pgm(tmp_path / "c.pgm")
    assert b.shape == (4, 5) and set(np.unique(b)) == {0, 255}
    assert c[1, 1] == round(255 * 0.6)
