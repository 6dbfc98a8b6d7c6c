import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynfilter.core import Pose, rotation_angle, so3_exp
from dynfilter.errors import NoConvergenceError, ParameterError, UnderdeterminedError
from dynfilter.pose import (
    Correspondence,
    huber,
    keyframe_decision,
    refine_pose,
    reprojection_residuals,
    retract,
    robust_cost,
    tree_sum,
)

from conftest import pnp_problem, random_pose


def corr_list(X, z, w=None, filtered=None):
    n = len(X)
    w = np.ones(n) if w is None else w
    filtered = np.zeros(n, dtype=bool) if filtered is None else filtered
    return [Correspondence(X[i], tuple(z[i]), float(w[i]), bool(filtered[i])) for i in range(n)]


def perturb(pose, rng, deg=5.0, metres=0.2):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d *= metres / np.linalg.norm(d)
    return Pose(so3_exp(axis * math.radians(deg)) @ pose.R, pose.t + d)


# --- Huber ------------------------------------------------------------------------------

def test_huber_examples():
    assert huber(0.0, 2.0) == (0.0, 1.0)
    assert huber(2.0, 2.0) == (2.0, 1.0)
    rho, w = huber(6.0, 2.0)
    assert rho == pytest.approx(2.5 * 4) and w == pytest.approx(1 / 3)
    with pytest.raises(ParameterError):
        huber(1.0, 0.0)


@given(st.floats(0, 100), st.floats(0.01, 10))
def test_huber_bounds(r, delta):
    rho, w = huber(r, delta)
    assert 0 < w <= 1
    assert rho <= 0.5 * r * r + 1e-9
    assert rho >= 0


def test_tree_sum_matches_sum():
    a = np.random.default_rng(0).normal(size=(37, 3))
    assert np.allclose(tree_sum(a), a.sum(axis=0), atol=1e-12)
    assert tree_sum(np.zeros((0, 2))).shape == (2,)


# --- Jacobian ---------------------------------------------------------------------------

def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(0)
    K, _, _, _, _ = pnp_problem(0)
    for _ in range(100):
        pose = random_pose(rng, max_angle=1.0, max_t=2.0)
        Xc = np.array([rng.uniform(-4, 4), rng.uniform(-3, 3), rng.uniform(2, 30)])
        X = pose.inverse().apply(Xc)[None]
        z = np.array([[300.0, 200.0]])
        _, J = reprojection_residuals(pose, K, X, z)
        num = np.zeros((2, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = 1e-6
            rp, _ = reprojection_residuals(retract(pose, e), K, X, z, with_jacobian=False)
            rm, _ = reprojection_residuals(retract(pose, -e), K, X, z, with_jacobian=False)
            num[:, k] = (rp[0] - rm[0]) / 2e-6
        rel = np.linalg.norm(J[0] - num) / max(np.linalg.norm(num), 1e-12)
        assert rel < 1e-4


# --- refine_pose ------------------------------------------------------------------------

def test_refine_fixed_point_at_truth():
    K, truth, X, z, _ = pnp_problem(1)
    res = refine_pose(truth, corr_list(X, z), K)
    assert res.pose.allclose(truth, 1e-9)
    assert res.cost == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_refine_recovers_from_perturbation(seed):
    K, truth, X, z, _ = pnp_problem(seed)
    init = perturb(truth, np.random.default_rng(seed + 100))
    res = refine_pose(init, corr_list(X, z), K)
    assert np.max(np.abs(res.pose.inverse().t - truth.inverse().t)) < 1e-6
    assert rotation_angle(res.pose.R @ truth.R.T) < 1e-6


def test_refine_costs_monotone():
    K, truth, X, z, _ = pnp_problem(2, n=60, dyn_frac=0.3, noise=0.5)
    res = refine_pose(perturb(truth, np.random.default_rng(0)), corr_list(X, z), K)
    assert all(b < a for a, b in zip(res.costs, res.costs[1:]))
    assert res.cost == res.costs[-1]


@pytest.mark.parametrize("seed", range(5))
def test_huber_beats_quadratic_with_dynamic_points(seed):
    K, truth, X, z, _ = pnp_problem(seed, n=100, dyn_frac=0.3, noise=0.5)
    c = corr_list(X, z)
    err = lambda p: np.linalg.norm(p.inverse().t - truth.inverse().t)
    assert err(refine_pose(truth, c, K, 2.0).pose) < err(refine_pose(truth, c, K, math.inf).pose) / 3


def test_refine_permutation_invariant():
    K, truth, X, z, _ = pnp_problem(3, noise=0.3, dyn_frac=0.2)
    c = corr_list(X, z, w=np.linspace(0.2, 1.0, len(X)))
    init = perturb(truth, np.random.default_rng(1))
    a = refine_pose(init, c, K)
    shuffled = list(c)
    random.Random(7).shuffle(shuffled)
    b = refine_pose(init, shuffled, K)
    assert a.pose.R.tobytes() == b.pose.R.tobytes() and a.pose.t.tobytes() == b.pose.t.tobytes()


def test_filtered_correspondences_have_no_influence():
    K, truth, X, z, _ = pnp_problem(4, noise=0.3)
    filt = np.zeros(len(X), dtype=bool)
    filt[:10] = True
    init = perturb(truth, np.random.default_rng(2))
    a = refine_pose(init, corr_list(X, z, filtered=filt), K)
    z2 = z.copy()
    z2[:10] += 300.0
    X2 = X.copy()
    X2[:10] *= -3
    b = refine_pose(init, corr_list(X2, z2, filtered=filt), K)
    assert a.pose.R.tobytes() == b.pose.R.tobytes() and a.pose.t.tobytes() == b.pose.t.tobytes()


def test_refine_info_weight_downweights():
    K, truth, X, z, dyn = pnp_problem(5, n=80, dyn_frac=0.3)
    err = lambda p: np.linalg.norm(p.inverse().t - truth.inverse().t)
    plain = refine_pose(truth, corr_list(X, z), K, math.inf).pose
    w = np.where(dyn, 1e-3, 1.0)
    weighted = refine_pose(truth, corr_list(X, z, w=w), K, math.inf).pose
    assert err(weighted) < err(plain)


def test_refine_errors():
    K, truth, X, z, _ = pnp_problem(6)
    with pytest.raises(UnderdeterminedError):
        refine_pose(truth, corr_list(X[:2], z[:2]), K)
    line = np.column_stack([np.linspace(100, 400, 10), np.full(10, 240.0)])
    with pytest.raises(UnderdeterminedError):
        refine_pose(truth, corr_list(X[:10], line), K)
    filt = np.ones(len(X), dtype=bool)
    with pytest.raises(UnderdeterminedError):
        refine_pose(truth, corr_list(X, z, filtered=filt), K)
    with pytest.raises(ParameterError):
        Correspondence(X[0], (1.0, 2.0), 0.0)


def test_no_convergence_error_carries_best_pose():
    err = NoConvergenceError("x", Pose.identity(), 3.0)
    assert err.best_cost == 3.0 and err.best_pose.allclose(Pose.identity())


def test_robust_cost_zero_at_truth():
    K, truth, X, z, _ = pnp_problem(7)
    assert robust_cost(truth, K, X, z, np.ones(len(X)), 2.0) == pytest.approx(0.0, abs=1e-15)


# --- keyframes ---------------------------------------------------------------------------

def test_keyframe_examples():
    assert keyframe_decision(100, 20, 0.5, 0.0) is True
    assert keyframe_decision(100, 200, 0.5, 0.0) is False
    assert keyframe_decision(0, 0, 1.0, 100.0) is False
    assert keyframe_decision(100, 0, 0.1, 25.0) is True
    assert keyframe_decision(100, 0, 0.1, 5.0) is False
    with pytest.raises(ParameterError):
        keyframe_decision(-1, 0, 0.0, 0.0)


counts = st.integers(0, 400)


@given(counts, counts, counts, st.floats(0, 2), st.floats(0, 60))
def test_keyframe_monotone(m, f, extra, dt, q):
    assert keyframe_decision(m + extra, f, dt, q) >= keyframe_decision(m, f, dt, q)
    assert keyframe_decision(m, f + extra, dt, q) <= keyframe_decision(m, f, dt, q)
