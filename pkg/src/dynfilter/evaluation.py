"""Trajectory and filter evaluation: Umeyama alignment, absolute and relative
pose errors, summary statistics, confusion metrics and improvement reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .core import Pose, nearest_rotation
from .errors import DegenerateAlignmentError, InputError, ParseError, ValidationError

KITTI = "kitti"
TUM = "tum"
STAT_FIELDS = ("max", "median", "min", "rmse")


@dataclass(frozen=True, eq=False)
class Trajectory:
    poses: Tuple[Pose, ...]
    fmt: str = KITTI

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValidationError("a trajectory needs at least one pose")
        stamps = [p.timestamp for p in poses]
        if all(s is not None for s in stamps) and any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValidationError("timestamps must be strictly increasing")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def positions(self):
        return np.array([p.t for p in self.poses])

    @property
    def timestamps(self):
        stamps = [p.timestamp for p in self.poses]
        return None if any(s is None for s in stamps) else np.array(stamps, dtype=float)

    def transformed(self, S: "SimilarityTransform") -> "Trajectory":
        """Apply a similarity to every pose (positions scaled, orientations rotated)."""
        out = [Pose(S.R @ p.R, S.scale * (S.R @ p.t) + S.t, p.timestamp) for p in self.poses]
        return Trajectory(tuple(out), self.fmt)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9:
            raise ValidationError("rotation is not orthonormal")

    def apply(self, X):
        return self.scale * (np.asarray(X, dtype=float) @ self.R.T) + self.t

    def inverse(self):
        Rt = self.R.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.t) / self.scale)


@dataclass(frozen=True)
class ErrorStats:
    max: float
    median: float
    min: float
    rmse: float

    def as_dict(self):
        return {f: getattr(self, f) for f in STAT_FIELDS}


@dataclass(frozen=True)
class ConfusionReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    @classmethod
    def from_counts(cls, tp, fp, fn, tn) -> "ConfusionReport":
        ratio = lambda a, b: a / b if b > 0 else None
        precision = ratio(tp, tp + fp)
        recall = ratio(tp, tp + fn)
        f1 = None
        if precision is not None and recall is not None and precision + recall > 0:
            f1 = 2.0 * precision * recall / (precision + recall)
        return cls(tp, fp, fn, tn, ratio(tp + tn, tp + fp + fn + tn), precision, recall, f1)


def f1_score(precision, recall):
    """Harmonic mean of precision and recall."""
    if precision + recall == 0:
        return None
    return 2.0 * precision * recall / (precision + recall)


def umeyama_align(est, gt, with_scale=True) -> SimilarityTransform:
    """Least-squares ``gt ≈ s R est + t`` over positions (Umeyama 1991)."""
    X = est.positions if isinstance(est, Trajectory) else np.asarray(est, dtype=float).reshape(-1, 3)
    Y = gt.positions if isinstance(gt, Trajectory) else np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(X) != len(Y):
        raise InputError(f"trajectory lengths differ ({len(X)} vs {len(Y)})")
    if len(X) < 3:
        raise DegenerateAlignmentError("alignment needs at least 3 positions")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    n = len(X)
    var_x = float(np.sum(Xc * Xc)) / n
    if var_x <= 1e-24 or float(np.sum(Yc * Yc)) / n <= 1e-24:
        raise DegenerateAlignmentError("positions are coincident")
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] <= 1e-10 * sx[0] or D[1] <= 1e-12 * D[0]:
        raise DegenerateAlignmentError("positions are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - scale * (R @ mx)
    return SimilarityTransform(scale, R, t)


def associate(est: Trajectory, gt: Trajectory, max_dt=0.01) -> List[Tuple[int, int]]:
    """Index pairs: by index for equal lengths, else nearest timestamp within ``max_dt``."""
    if len(est) == len(gt):
        return [(i, i) for i in range(len(est))]
    te, tg = est.timestamps, gt.timestamps
    if te is None or tg is None:
        raise InputError("trajectories differ in length and lack timestamps for association")
    pairs = []
    used = set()
    for i, t in enumerate(te):
        j = int(np.argmin(np.abs(tg - t)))
        if abs(tg[j] - t) <= max_dt and j not in used:
            pairs.append((i, j))
            used.add(j)
    if not pairs:
        raise InputError("no poses could be associated")
    return pairs


def _associated(est, gt):
    pairs = associate(est, gt)
    e = Trajectory(tuple(est[i] for i, _ in pairs), est.fmt)
    g = Trajectory(tuple(gt[j] for _, j in pairs), gt.fmt)
    return e, g


def ape(est: Trajectory, gt: Trajectory, align=True, with_scale=False) -> np.ndarray:
    """Per-pose translational absolute error, optionally after Umeyama alignment."""
    e, g = _associated(est, gt)
    P = e.positions
    if align:
        P = umeyama_align(e, g, with_scale).apply(P)
    return np.linalg.norm(g.positions - P, axis=1)


def rpe(est: Trajectory, gt: Trajectory, delta=1) -> np.ndarray:
    """Translational error of relative motions over an index gap ``delta``."""
    e, g = _associated(est, gt)
    if delta < 1:
        raise InputError("delta must be at least 1")
    if delta >= len(e):
        raise InputError(f"delta {delta} must be smaller than the trajectory length {len(e)}")
    out = np.empty(len(e) - delta)
    for i in range(len(e) - delta):
        q_gt = g[i].inverse() @ g[i + delta]
        q_est = e[i].inverse() @ e[i + delta]
        out[i] = np.linalg.norm((q_gt.inverse() @ q_est).t)
    return out


def stats(errors: Sequence[float]) -> ErrorStats:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise InputError("no errors to summarise")
    return ErrorStats(float(e.max()), float(np.median(e)), float(e.min()), float(math.sqrt(np.mean(e * e))))


def confusion(pred_dynamic, gt_dynamic) -> ConfusionReport:
    p = np.asarray(pred_dynamic, dtype=bool)
    g = np.asarray(gt_dynamic, dtype=bool)
    if p.shape != g.shape:
        raise InputError(f"prediction and label counts differ ({p.size} vs {g.size})")
    if p.size == 0:
        raise InputError("no labelled points")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return ConfusionReport.from_counts(tp, fp, fn, tn)


def improvement_report(baseline: ErrorStats, ours: ErrorStats) -> Dict[str, Optional[float]]:
    """Percent improvement per field; negative means degradation, ``None`` a zero baseline."""
    out = {}
    for f in STAT_FIELDS:
        b, o = getattr(baseline, f), getattr(ours, f)
        out[f] = None if b == 0 else 100.0 * (b - o) / b
    return out


# --- trajectory files ---------------------------------------------------------

def _checked_rotation(M, path, lineno):
    err = np.max(np.abs(M.T @ M - np.eye(3)))
    if err > 1e-3 or np.linalg.det(M) <= 0:
        raise ValidationError(f"{path}:{lineno}: rotation not orthonormal (error {err:.2e})")
    return nearest_rotation(M)


def parse_trajectory(path, fmt=KITTI) -> Trajectory:
    """Read a KITTI (12 values, row-major 3x4) or TUM (t tx ty tz qx qy qz qw) file."""
    if fmt not in (KITTI, TUM):
        raise InputError(f"unknown trajectory format {fmt!r}")
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            fields = s.replace(",", " ").split()
            want = 12 if fmt == KITTI else 8
            if len(fields) != want:
                raise ParseError(f"expected {want} values, got {len(fields)}", path, lineno)
            try:
                vals = [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", path, lineno)
            if fmt == KITTI:
                M = np.array(vals).reshape(3, 4)
                poses.append(Pose(_checked_rotation(M[:, :3], path, lineno), M[:, 3]))
            else:
                q = np.array(vals[4:8])
                qn = float(np.linalg.norm(q))
                if abs(qn - 1.0) > 1e-3:
                    raise ValidationError(f"{path}:{lineno}: quaternion norm {qn:.6f} not within 1e-3 of 1")
                R = nearest_rotation(Rotation.from_quat(q / qn).as_matrix())
                poses.append(Pose(R, vals[1:4], vals[0]))
    if not poses:
        raise ParseError("no poses found", path)
    return Trajectory(tuple(poses), fmt)


def write_trajectory(path, traj: Trajectory, fmt=None):
    fmt = fmt or traj.fmt
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(traj.poses):
            if fmt == KITTI:
                M = np.hstack([p.R, p.t[:, None]])
                fh.write(" ".join(repr(float(v)) for v in M.ravel()) + "\n")
            else:
                q = Rotation.from_matrix(p.R).as_quat()
                ts = p.timestamp if p.timestamp is not None else float(i)
                fh.write(" ".join(repr(float(v)) for v in [ts, *p.t, *q]) + "\n")


# --- labels and CSV outputs -----------------------------------------------------

def read_labels(path) -> Dict[Tuple[int, int], bool]:
    """``track_id frame_id gt_dynamic`` lines -> ``{(frame_id, track_id): dynamic}``."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split()
            if not s:
                continue
            if len(s) != 3 or s[2] not in ("0", "1"):
                raise ParseError("expected 'track_id frame_id 0|1'", path, lineno)
            try:
                out[(int(s[1]), int(s[0]))] = s[2] == "1"
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    return out


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_stats_csv(path, rows: Dict[str, ErrorStats]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *STAT_FIELDS])
        for name, st in rows.items():
            w.writerow([name, *(_fmt(getattr(st, f)) for f in STAT_FIELDS)])


def read_stats_csv(path) -> Dict[str, ErrorStats]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in ("metric", *STAT_FIELDS)):
            raise ParseError("stats CSV needs header metric,max,median,min,rmse", path)
        for lineno, row in enumerate(reader, 2):
            try:
                out[row["metric"]] = ErrorStats(*(float(row[f]) for f in STAT_FIELDS))
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), path, lineno) from None
    return out


def write_confusion_csv(path, rep: ConfusionReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1"])
        w.writerow([rep.tp, rep.fp, rep.fn, rep.tn, _fmt(rep.accuracy), _fmt(rep.precision), _fmt(rep.recall), _fmt(rep.f1)])


def write_improvement_csv(path, baseline: Dict[str, ErrorStats], ours: Dict[str, ErrorStats]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "field", "baseline", "ours", "improvement_pct", "direction"])
        for name in baseline:
            if name not in ours:
                continue
            rep = improvement_report(baseline[name], ours[name])
            for f in STAT_FIELDS:
                pct = rep[f]
                if pct is None:
                    direction = "undefined"
                elif pct > 0:
                    direction = "improvement"
                elif pct < 0:
                    direction = "degradation"
                else:
                    direction = "unchanged"
                pct_s = "undefined" if pct is None else f"{pct:.4f}"
                w.writerow([name, f, _fmt(getattr(baseline[name], f)), _fmt(getattr(ours[name], f)), pct_s, direction])


def write_plot_csv(path, errors):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "error"])
        for i, e in enumerate(errors):
            w.writerow([i, repr(float(e))])
