"""Robust camera-pose refinement over filtered correspondences, and the
filtering-aware keyframe rule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .core import CameraIntrinsics, Pose, renormalized, so3_exp
from .errors import NoConvergenceError, ParameterError, UnderdeterminedError


@dataclass(frozen=True, eq=False)
class Correspondence:
    map_point: np.ndarray
    observation: tuple
    info_weight: float = 1.0
    filtered: bool = False

    def __post_init__(self):
        if not self.info_weight > 0:
            raise ParameterError("info_weight must be positive")


def huber(r, delta):
    """Huber loss of a residual magnitude: returns ``(rho, irls_weight)``."""
    if not delta > 0:
        raise ParameterError("Huber knee must be positive")
    if r <= delta:
        return 0.5 * r * r, 1.0
    return delta * (r - 0.5 * delta), delta / r


def _huber_vec(e, delta):
    if math.isinf(delta):
        return 0.5 * e * e, np.ones_like(e)
    quad = e <= delta
    with np.errstate(divide="ignore"):
        rho = np.where(quad, 0.5 * e * e, delta * (e - 0.5 * delta))
        w = np.where(quad, 1.0, delta / np.where(quad, 1.0, e))
    return rho, w


def tree_sum(a):
    """Sum along axis 0 with a fixed pairwise topology (worker-count independent)."""
    a = np.asarray(a, dtype=float)
    if len(a) == 0:
        return np.zeros(a.shape[1:])
    while len(a) > 1:
        if len(a) % 2:
            a = np.concatenate([a, np.zeros((1,) + a.shape[1:])])
        a = a[0::2] + a[1::2]
    return a[0]


def retract(pose: Pose, xi) -> Pose:
    """Left update ``[Exp(phi) | rho] ∘ pose`` with ``xi = (rho, phi)``."""
    xi = np.asarray(xi, dtype=float)
    dR = so3_exp(xi[3:])
    return Pose(renormalized(dR @ pose.R), dR @ pose.t + xi[:3], pose.timestamp)


def reprojection_residuals(pose: Pose, K: CameraIntrinsics, X, z, sqrt_w=None, with_jacobian=True):
    """Weighted residuals ``sqrt(w) * (z - h(T, X))`` (N, 2) and their
    Jacobians (N, 2, 6) with respect to the left tangent ``(rho, phi)``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    sw = np.ones(len(X)) if sqrt_w is None else np.asarray(sqrt_w, dtype=float)
    Xc = X @ pose.R.T + pose.t
    x, y, d = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    h = np.column_stack([K.fx * x / d + K.cx, K.fy * y / d + K.cy])
    r = sw[:, None] * (z - h)
    if not with_jacobian:
        return r, None
    n = len(X)
    dh = np.zeros((n, 2, 3))
    dh[:, 0, 0] = K.fx / d
    dh[:, 0, 2] = -K.fx * x / (d * d)
    dh[:, 1, 1] = K.fy / d
    dh[:, 1, 2] = -K.fy * y / (d * d)
    dX = np.zeros((n, 3, 6))
    dX[:, :, :3] = np.eye(3)
    dX[:, 0, 4] = Xc[:, 2]
    dX[:, 0, 5] = -Xc[:, 1]
    dX[:, 1, 3] = -Xc[:, 2]
    dX[:, 1, 5] = Xc[:, 0]
    dX[:, 2, 3] = Xc[:, 1]
    dX[:, 2, 4] = -Xc[:, 0]
    J = -sw[:, None, None] * np.einsum("nij,njk->nik", dh, dX)
    return r, J


class RefineResult(NamedTuple):
    pose: Pose
    cost: float
    iterations: int
    costs: List[float]


def _valid_arrays(corr: Sequence[Correspondence]):
    valid = [c for c in corr if not c.filtered]
    if not valid:
        return np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
    X = np.array([c.map_point for c in valid], dtype=float).reshape(-1, 3)
    z = np.array([c.observation for c in valid], dtype=float).reshape(-1, 2)
    w = np.array([c.info_weight for c in valid], dtype=float)
    # canonical order makes every reduction independent of the input order
    order = np.lexsort((w, z[:, 1], z[:, 0], X[:, 2], X[:, 1], X[:, 0]))
    return X[order], z[order], w[order]


def robust_cost(pose, K, X, z, w, delta):
    r, _ = reprojection_residuals(pose, K, X, z, np.sqrt(w), with_jacobian=False)
    e = np.hypot(r[:, 0], r[:, 1])
    rho, _ = _huber_vec(e, delta)
    return float(tree_sum(rho)) if len(rho) else 0.0


def refine_pose(init: Pose, corr: Sequence[Correspondence], K: CameraIntrinsics, delta: float = 2.0,
                max_iters: int = 50) -> RefineResult:
    """Minimise the robust weighted reprojection cost over unfiltered correspondences.

    Iteratively reweighted Gauss-Newton with Levenberg-Marquardt damping on the
    left tangent of SE(3). ``delta=math.inf`` gives plain least squares.
    Accepted steps strictly decrease the cost.
    """
    X, z, w = _valid_arrays(corr)
    if len(X) < 3:
        raise UnderdeterminedError(f"{len(X)} valid correspondences; at least 3 required")
    zc = z - z.mean(axis=0)
    s = np.linalg.svd(zc, compute_uv=False)
    if s[0] == 0.0 or s[1] <= 1e-9 * s[0]:
        raise UnderdeterminedError("observations are collinear in the image")
    if not delta > 0:
        raise ParameterError("Huber knee must be positive")
    sw = np.sqrt(w)

    pose = init
    cost = robust_cost(pose, K, X, z, w, delta)
    costs = [cost]
    lam = 1e-6
    it = 0
    while it < max_iters:
        it += 1
        r, J = reprojection_residuals(pose, K, X, z, sw)
        e = np.hypot(r[:, 0], r[:, 1])
        _, irls = _huber_vec(e, delta)
        H = tree_sum(irls[:, None, None] * np.einsum("nki,nkj->nij", J, J))
        g = tree_sum(irls[:, None] * np.einsum("nki,nk->ni", J, r))
        while True:
            A = H + lam * np.diag(np.diag(H))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A, -g, rcond=None)[0]
            if np.linalg.norm(step) < 1e-8:
                return RefineResult(pose, cost, it, costs)
            cand = retract(pose, step)
            new_cost = robust_cost(cand, K, X, z, w, delta)
            if new_cost < cost:
                decrease = cost - new_cost
                pose, cost = cand, new_cost
                costs.append(cost)
                lam = max(lam / 10.0, 1e-12)
                if decrease < 1e-10:
                    return RefineResult(pose, cost, it, costs)
                break
            lam *= 10.0
            if lam > 1e8:
                raise NoConvergenceError("damping exceeded 1e8 without a cost decrease", pose, cost)
            it += 1
            if it > max_iters:
                return RefineResult(pose, cost, it - 1, costs)
    return RefineResult(pose, cost, it, costs)


def keyframe_decision(n_matches, n_filtered, dt, q_motion, n_min=50, ratio_max=0.6, dt_min=0.25, q_min=20.0) -> bool:
    """Insert a keyframe when matches suffice, the filtered share is tolerable,
    and either enough time has passed or the image moved enough."""
    if n_matches < 0 or n_filtered < 0 or dt < 0:
        raise ParameterError("counts and elapsed time must be non-negative")
    total = n_matches + n_filtered
    if total == 0:
        return False
    return bool(n_matches >= n_min and n_filtered / total <= ratio_max and (dt >= dt_min or q_motion >= q_min))
