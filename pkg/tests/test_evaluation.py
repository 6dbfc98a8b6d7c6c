import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynfilter.core import Pose, rot_z
from dynfilter.errors import DegenerateAlignmentError, InputError, ParseError, ValidationError
from dynfilter.evaluation import (
    KITTI,
    TUM,
    ConfusionReport,
    ErrorStats,
    SimilarityTransform,
    Trajectory,
    ape,
    confusion,
    improvement_report,
    parse_trajectory,
    read_labels,
    read_stats_csv,
    rpe,
    stats,
    umeyama_align,
    write_improvement_csv,
    write_stats_csv,
    write_trajectory,
)

from conftest import random_pose


def random_traj(rng, n=20, stamps=False):
    poses = []
    for i in range(n):
        p = random_pose(rng, max_t=10.0)
        poses.append(p.with_timestamp(0.1 * i) if stamps else p)
    return Trajectory(tuple(poses))


def line_traj(step, n=6):
    return Trajectory(tuple(Pose(np.eye(3), [step * i, 0.0, 0.0]) for i in range(n)))


def premultiply(traj, T):
    return Trajectory(tuple(T @ p for p in traj.poses))


# --- Umeyama ------------------------------------------------------------------------------

def test_umeyama_identity():
    rng = np.random.default_rng(0)
    t = random_traj(rng)
    S = umeyama_align(t, t)
    assert abs(S.scale - 1) < 1e-12
    assert np.allclose(S.R, np.eye(3), atol=1e-12) and np.allclose(S.t, 0, atol=1e-12)


def test_umeyama_recovers_inverse_of_known_similarity():
    rng = np.random.default_rng(1)
    gt = random_traj(rng)
    T = SimilarityTransform(2.0, rot_z(math.radians(30)), np.array([1.0, -2.0, 3.0]))
    est = gt.transformed(T)
    S = umeyama_align(est, gt, with_scale=True)
    inv = T.inverse()
    assert abs(S.scale - inv.scale) < 1e-9
    assert np.allclose(S.R, inv.R, atol=1e-9) and np.allclose(S.t, inv.t, atol=1e-9)


def test_umeyama_degenerate():
    P = np.zeros((5, 3))
    with pytest.raises(DegenerateAlignmentError):
        umeyama_align(P, P)
    L = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
    with pytest.raises(DegenerateAlignmentError):
        umeyama_align(L, L)
    with pytest.raises(InputError):
        umeyama_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_umeyama_prevents_reflection():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(30, 3))
    Q = P * [1, 1, -1]
    S = umeyama_align(P, Q, with_scale=False)
    assert np.linalg.det(S.R) > 0


# --- APE / RPE ---------------------------------------------------------------------------

def test_ape_examples():
    rng = np.random.default_rng(3)
    gt = random_traj(rng)
    assert np.all(ape(gt, gt, align=False) == 0)
    shifted = Trajectory(tuple(Pose(p.R, p.t + [1, 0, 0]) for p in gt.poses))
    assert np.all(ape(shifted, gt, align=True) < 1e-9)
    assert np.allclose(ape(shifted, gt, align=False), 1.0)


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_ape_aligned_invariant_to_similarity(seed, scale):
    rng = np.random.default_rng(seed)
    gt = random_traj(rng, n=12)
    noisy = Trajectory(tuple(Pose(p.R, p.t + rng.normal(0, 0.1, 3)) for p in gt.poses))
    T = SimilarityTransform(rng.uniform(0.5, 2.0) if scale else 1.0, random_pose(rng).R, rng.normal(size=3) * 5)
    a = ape(noisy, gt, align=True, with_scale=scale)
    b = ape(noisy.transformed(T), gt, align=True, with_scale=scale)
    assert np.allclose(a, b, atol=1e-9)


def test_rpe_examples():
    rng = np.random.default_rng(4)
    gt = random_traj(rng)
    assert np.allclose(rpe(gt, gt), 0, atol=1e-12)
    T = random_pose(rng)
    assert np.allclose(rpe(premultiply(gt, T), gt), 0, atol=1e-9)
    assert np.allclose(rpe(line_traj(1.1), line_traj(1.0), 1), 0.1, atol=1e-12)
    with pytest.raises(InputError):
        rpe(gt, gt, len(gt))
    with pytest.raises(InputError):
        rpe(gt, gt, 0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_rpe_invariant_to_global_transform(seed, delta):
    rng = np.random.default_rng(seed)
    gt = random_traj(rng, n=10)
    est = Trajectory(tuple(Pose(p.R, p.t + rng.normal(0, 0.2, 3)) for p in gt.poses))
    T1, T2 = random_pose(rng), random_pose(rng)
    base = rpe(est, gt, delta)
    assert np.allclose(rpe(premultiply(est, T1), premultiply(gt, T2), delta), base, atol=1e-9)


def test_association_by_timestamp():
    rng = np.random.default_rng(5)
    gt = random_traj(rng, n=10, stamps=True)
    est = Trajectory(tuple(p.with_timestamp(p.timestamp + 0.004) for p in gt.poses[2:8]))
    assert np.allclose(ape(est, gt, align=False), 0.0)
    far = Trajectory(tuple(p.with_timestamp(p.timestamp + 0.05) for p in gt.poses[2:8]))
    with pytest.raises(InputError):
        ape(far, gt, align=False)


# --- stats ----------------------------------------------------------------------------------

def test_stats_examples():
    s = stats([3, 4])
    assert (s.max, s.median, s.min) == (4, 3.5, 3)
    assert s.rmse == pytest.approx(math.sqrt(12.5))
    assert stats([1, 2, 3]).median == 2
    assert stats([0, 0, 0]) == ErrorStats(0, 0, 0, 0)
    with pytest.raises(InputError):
        stats([])


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_stats_scaling_and_order(errs, k):
    s = stats(errs)
    assert s.min <= s.median <= s.max
    assert s.rmse >= abs(np.mean(errs)) - 1e-9
    t = stats([k * e for e in errs])
    assert (t.max, t.median, t.min) == (k * s.max, k * s.median, k * s.min)
    assert t.rmse == pytest.approx(k * s.rmse, rel=1e-12)


# --- confusion and improvement -------------------------------------------------------------

def test_confusion_examples():
    g = np.array([1, 1, 0, 0, 1], dtype=bool)
    r = confusion(g, g)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)
    r = ConfusionReport.from_counts(9418, 582, 2647, 10000)
    assert r.f1 == pytest.approx(0.8537, abs=1e-4)
    r = ConfusionReport.from_counts(9364, 636, 3120, 10000)
    assert r.f1 == pytest.approx(0.8330, abs=1e-4)
    with pytest.raises(InputError):
        confusion([True], [True, False])


def test_confusion_undefined_ratios_absent():
    r = confusion([False, False], [False, False])
    assert r.precision is None and r.recall is None and r.f1 is None
    assert r.accuracy == 1.0


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_confusion_invariants(pairs):
    p, g = zip(*pairs)
    r = confusion(p, g)
    assert r.tp + r.fp + r.fn + r.tn == len(pairs)
    assert r.accuracy == (r.tp + r.tn) / len(pairs)
    if r.f1 is not None:
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


def test_improvement_examples():
    base = ErrorStats(1.0, 0.2773, 0.1, 0.2814)
    ours = ErrorStats(1.0, 0.1929, 0.1, 0.2084)
    rep = improvement_report(base, ours)
    assert rep["rmse"] == pytest.approx(25.9, abs=0.05)
    assert rep["median"] == pytest.approx(30.4, abs=0.05)
    assert rep["max"] == 0.0
    assert improvement_report(ErrorStats(0, 1, 1, 1), base)["max"] is None
    assert improvement_report(base, ErrorStats(1.2, 0.3, 0.1, 0.3))["max"] < 0


def test_stats_and_improvement_csv(tmp_path):
    rows = {"ape": ErrorStats(2.0, 1.0, 0.5, 1.2), "rpe": ErrorStats(0.3, 0.2, 0.1, 0.21)}
    write_stats_csv(tmp_path / "a.csv", rows)
    assert read_stats_csv(tmp_path / "a.csv") == rows
    write_improvement_csv(tmp_path / "imp.csv", rows, {"ape": ErrorStats(2.0, 0.5, 0.5, 1.5)})
    text = (tmp_path / "imp.csv").read_text().splitlines()
    assert text[0] == "metric,field,baseline,ours,improvement_pct,direction"
    assert any(line.endswith("50.0000,improvement") for line in text)
    assert any(line.endswith("-25.0000,degradation") for line in text)
    assert len(text) == 5


# --- files ---------------------------------------------------------------------------------

def test_parse_kitti_and_tum_examples(tmp_path):
    k = tmp_path / "k.txt"
    k.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    t = parse_trajectory(k, KITTI)
    assert t[0].allclose(Pose.identity(), 0)
    u = tmp_path / "u.txt"
    u.write_text("0.0 1 2 3 0 0 0 1\n")
    p = parse_trajectory(u, TUM)[0]
    assert np.array_equal(p.t, [1, 2, 3]) and np.allclose(p.R, np.eye(3)) and p.timestamp == 0.0
    bad = tmp_path / "bad.txt"
    bad.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ParseError, match="2"):
        parse_trajectory(bad, KITTI)


def test_parse_tolerances(tmp_path):
    q = tmp_path / "q.txt"
    q.write_text("0.0 0 0 0 0 0 0 1.0005\n")
    assert np.allclose(parse_trajectory(q, TUM)[0].R, np.eye(3))
    q.write_text("0.0 0 0 0 0 0 0 1.01\n")
    with pytest.raises(ValidationError):
        parse_trajectory(q, TUM)
    k = tmp_path / "k.txt"
    k.write_text("1.0004 0 0 0 0 1 0 0 0 0 1 0\n")
    R = parse_trajectory(k, KITTI)[0].R
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    k.write_text("1.1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(ValidationError):
        parse_trajectory(k, KITTI)


@pytest.mark.parametrize("fmt", [KITTI, TUM])
def test_trajectory_round_trip(tmp_path, fmt):
    rng = np.random.default_rng(6)
    traj = random_traj(rng, stamps=(fmt == TUM))
    write_trajectory(tmp_path / "t.txt", traj, fmt)
    back = parse_trajectory(tmp_path / "t.txt", fmt)
    assert len(back) == len(traj)
    for a, b in zip(traj.poses, back.poses):
        assert a.allclose(b, 1e-9)


def test_read_labels(tmp_path):
    p = tmp_path / "labels.txt"
    p.write_text("5 0 1\n6 0 0\n5 1 1\n")
    assert read_labels(p) == {(0, 5): True, (0, 6): False, (1, 5): True}
    p.write_text("5 0 2\n")
    with pytest.raises(ParseError):
        read_labels(p)


def test_trajectory_validation():
    with pytest.raises(ValidationError):
        Trajectory(())
    with pytest.raises(ValidationError):
        Trajectory((Pose.identity(1.0), Pose.identity(0.5)))
